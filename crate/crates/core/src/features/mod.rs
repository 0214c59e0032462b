//! Modality front ends: PCM audio to MFCC frames, video block pooling,
//! and the subword tokenizer.

pub mod audio;
pub mod bpe;

pub use audio::{mfcc, resample_mono, Mfcc, Pcm};
pub use bpe::{tokenize, tokenize_target, Vocabulary};

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Linear, Proj};
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VIDEO_FEATURE_DIM: usize = 2048;
pub const DEFAULT_AUDIO_LEN: usize = 256;

/// Projected audio frames `[audio_len, d]`; rows past `valid` are zero.
pub struct AudioFeatures {
    pub frames: Var,
    pub valid: usize,
}

impl AudioFeatures {
    pub fn mask(&self, audio_len: usize) -> Vec<bool> {
        (0..audio_len).map(|i| i < self.valid).collect()
    }
}

/// Applies `proj` to each MFCC frame, then clips or zero-pads to `audio_len`.
pub fn project_audio<T: Scalar>(g: &Graph<'_, T>, proj: &Linear, mfcc: &Tensor<T>, audio_len: usize) -> Result<AudioFeatures> {
    let (frames, width) = mfcc.dims2()?;
    let (d_in, d_out) = Proj::<T>::dims(proj);
    if width != d_in || audio_len == 0 {
        return Err(shape_err!("audio frames {:?} for a {d_in}→{d_out} projection, length {audio_len}", mfcc.shape()));
    }
    let t = &g.tape;
    let valid = frames.min(audio_len);
    if valid == 0 {
        return Ok(AudioFeatures { frames: t.constant(Tensor::zeros(&[audio_len, d_out])), valid });
    }
    let kept = Tensor::new(&[valid, width], mfcc.data()[..valid * width].to_vec())?;
    let projected = proj.forward(g, t.constant(kept))?;
    let frames = if valid < audio_len {
        let pad = t.constant(Tensor::zeros(&[audio_len - valid, d_out]));
        t.concat_rows(&[projected, pad])?
    } else {
        projected
    };
    Ok(AudioFeatures { frames, valid })
}

/// Mean-pools `[B, 2048]` block vectors and projects the result to `[1, d]`.
pub fn ingest_video<T: Scalar>(g: &Graph<'_, T>, proj: &Linear, blocks: &Tensor<T>) -> Result<Var> {
    let (b, width) = blocks.dims2()?;
    if width != VIDEO_FEATURE_DIM || b == 0 {
        return Err(shape_err!("video blocks must be [B ≥ 1, {VIDEO_FEATURE_DIM}], got {:?}", blocks.shape()));
    }
    if Proj::<T>::dims(proj).0 != VIDEO_FEATURE_DIM {
        return Err(shape_err!("video projection input width must be {VIDEO_FEATURE_DIM}"));
    }
    let pooled = g.tape.mean_rows(g.tape.constant(blocks.clone()))?;
    proj.forward(g, pooled)
}
