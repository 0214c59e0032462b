//! Loading prepared directories into model examples.

use std::path::{Path, PathBuf};

use mtldr_core::eval::EvalSample;
use mtldr_core::features::{tokenize, tokenize_target, Vocabulary};
use mtldr_core::model::{Example, ModelConfig};
use mtldr_core::Tensor;

use crate::error::{AppError, Result};
use crate::manifest::Split;
use crate::prepare::{PreparedRecord, INDEX_FILE, VOCAB_FILE};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub dir: PathBuf,
    pub records: Vec<PreparedRecord>,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| AppError::Data(format!("prepared index {} is unreadable ({e}); run prepare first", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: PreparedRecord = serde_json::from_str(line)
                .map_err(|e| AppError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Ok(Self { dir: dir.to_path_buf(), records })
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        let path = self.dir.join(VOCAB_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(format!("reading {}", path.display()), e))?;
        Ok(Vocabulary::from_text(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PreparedRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    fn tensor(&self, file: &Path) -> Result<Tensor> {
        let path = self.dir.join(file);
        let bytes = std::fs::read(&path).map_err(|e| AppError::io(format!("reading {}", path.display()), e))?;
        Ok(Tensor::from_bytes(&bytes)?)
    }

    /// Tokenizes a record and loads its features; placeholders for missing
    /// modalities become `None`.
    pub fn example(&self, r: &PreparedRecord, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Example> {
        Ok(Example {
            id: r.id.clone(),
            source: tokenize(&r.source, vocab, cfg.max_source_len),
            target: tokenize_target(&r.target, vocab, cfg.max_target_len),
            audio: if r.has_audio { Some(self.tensor(&r.audio_file)?) } else { None },
            video: if r.has_video { Some(self.tensor(&r.video_file)?) } else { None },
        })
    }

    pub fn examples<'a>(
        &self,
        records: impl IntoIterator<Item = &'a PreparedRecord>,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<Vec<Example>> {
        records.into_iter().map(|r| self.example(r, vocab, cfg)).collect()
    }
}

pub fn eval_sample(r: &PreparedRecord) -> EvalSample {
    EvalSample { id: r.id.clone(), split: r.split.to_string(), source: Some(r.source.clone()), target: r.target.clone() }
}
