//! A loaded checkpoint ready for inference.

use std::collections::HashMap;
use std::path::Path;

use mtldr_core::checkpoint::Checkpoint;
use mtldr_core::eval::{EvalSample, Summarizer};
use mtldr_core::features::{tokenize, Vocabulary};
use mtldr_core::model::{Example, Model};
use mtldr_core::training::RunConfig;
use mtldr_core::ParamStore;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::prepare::{audio_features, video_features};

/// Raw request inputs in field order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inputs {
    pub text: Vec<u8>,
    pub audio: Option<Vec<u8>>,
    pub video: Option<Vec<u8>>,
}

impl Inputs {
    pub fn fields(&self) -> Vec<(&'static str, &[u8])> {
        let mut out = vec![("text", self.text.as_slice())];
        out.extend(self.audio.as_deref().map(|b| ("audio", b)));
        out.extend(self.video.as_deref().map(|b| ("video", b)));
        out
    }

    /// SHA-256 over the present fields in order, each framed by its name
    /// and byte length, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in self.fields() {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex::encode(h.finalize())
    }
}

/// Anything that can turn request inputs into a summary.
pub trait SummaryModel: Send + Sync {
    fn summarize(&self, inputs: &Inputs) -> Result<String>;
    fn model_hash(&self) -> &str;
}

pub struct Engine {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    model_hash: String,
}

impl Engine {
    /// Loads a checkpoint; a missing or unreadable file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| AppError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck = Checkpoint::from_bytes(&bytes)
            .map_err(|e| AppError::Config(format!("checkpoint {}: {e}", path.display())))?;
        Self::new(ck, hex::encode(Sha256::digest(&bytes)))
    }

    pub fn new(ck: Checkpoint, model_hash: String) -> Result<Self> {
        let vocab = ck.vocab.ok_or_else(|| AppError::Config("checkpoint has no vocabulary".into()))?;
        Ok(Self { config: ck.config, model: ck.model, store: ck.store, vocab, model_hash })
    }

    pub fn summarize_example(&self, ex: &Example) -> Result<String> {
        let h = self.model.summarize(&self.store, ex, &self.config.search)?;
        Ok(self.vocab.decode(&h.ids))
    }

    pub fn example_from_inputs(&self, id: &str, inputs: &Inputs) -> Result<Example> {
        let text = std::str::from_utf8(&inputs.text).map_err(|_| AppError::Data("text is not UTF-8".into()))?;
        Ok(Example {
            id: id.to_string(),
            source: tokenize(text, &self.vocab, self.config.model.max_source_len),
            target: Vec::new(),
            audio: inputs.audio.as_deref().map(audio_features).transpose()?,
            video: inputs.video.as_deref().map(video_features).transpose()?,
        })
    }
}

impl SummaryModel for Engine {
    fn summarize(&self, inputs: &Inputs) -> Result<String> {
        let ex = self.example_from_inputs("request", inputs)?;
        self.summarize_example(&ex)
    }

    fn model_hash(&self) -> &str {
        &self.model_hash
    }
}

/// Summarizes evaluation samples by looking up their prepared examples.
pub struct CorpusSummarizer<'a> {
    pub engine: &'a Engine,
    pub examples: HashMap<String, Example>,
}

impl Summarizer for CorpusSummarizer<'_> {
    fn summarize(&self, sample: &EvalSample) -> mtldr_core::Result<String> {
        let ex = self
            .examples
            .get(&sample.id)
            .ok_or_else(|| mtldr_core::Error::Data(format!("no prepared features for {}", sample.id)))?;
        self.engine.summarize_example(ex).map_err(|e| match e {
            AppError::Core(c) => c,
            other => mtldr_core::Error::Data(other.to_string()),
        })
    }
}
