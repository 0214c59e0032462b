//! Corpus preparation, command implementations and the summarization
//! service built on `mtldr-core`.

pub mod cache;
pub mod commands;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod manifest;
pub mod prepare;
pub mod service;
pub mod synth;
pub mod wav;

pub use error::{AppError, Result};
