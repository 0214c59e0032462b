//! Feature extraction and vocabulary building for a manifest.

use std::path::{Path, PathBuf};

use mtldr_core::features::{mfcc, resample_mono, Vocabulary, VIDEO_FEATURE_DIM};
use mtldr_core::features::audio::MFCC_COEFFS;
use mtldr_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::manifest::{Manifest, SampleManifest, Split};
use crate::wav::decode_wav;

pub const INDEX_FILE: &str = "index.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FEATURE_DIR: &str = "features";

/// One prepared sample as listed in the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub id: String,
    pub split: Split,
    pub source: String,
    pub target: String,
    pub has_audio: bool,
    pub has_video: bool,
    /// Feature files relative to the prepared directory.
    pub audio_file: PathBuf,
    pub video_file: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub id: String,
    pub split: Split,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct PrepareReport {
    pub prepared: usize,
    pub vocab_size: usize,
    pub failures: Vec<Failure>,
}

impl PrepareReport {
    pub fn train_failures(&self) -> usize {
        self.failures.iter().filter(|f| f.split == Split::Train).count()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(format!("reading {}", path.display()), e))
}

/// Writes `bytes` unless the file already holds exactly them.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| AppError::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| AppError::io(format!("writing {}", path.display()), e))
}

/// MFCC frames `[T, 40]` of WAV bytes.
pub fn audio_features(wav: &[u8]) -> Result<Tensor> {
    let pcm = decode_wav(wav)?;
    Ok(mfcc(&resample_mono(&pcm)?)?)
}

/// Video blocks `[B, 2048]` from a tensor file; a single vector counts as
/// one block.
pub fn video_features(bytes: &[u8]) -> Result<Tensor> {
    let t = Tensor::from_bytes(bytes)?;
    let t = match *t.shape() {
        [n] => t.reshape(&[1, n])?,
        _ => t,
    };
    match *t.shape() {
        [b, VIDEO_FEATURE_DIM] if b > 0 => Ok(t),
        ref s => Err(AppError::Data(format!("video features must be [blocks, {VIDEO_FEATURE_DIM}], got {s:?}"))),
    }
}

struct Extracted {
    record: PreparedRecord,
    audio: Tensor,
    video: Tensor,
}

fn extract(m: &Manifest, s: &SampleManifest) -> Result<Extracted> {
    let text = String::from_utf8(read(&m.resolve(&s.text_path))?)
        .map_err(|_| AppError::Data(format!("{} is not UTF-8", s.text_path.display())))?;
    let audio = s.audio_path.as_ref().map(|p| read(&m.resolve(p)).and_then(|b| audio_features(&b))).transpose()?;
    let video = s.video_feat_path.as_ref().map(|p| read(&m.resolve(p)).and_then(|b| video_features(&b))).transpose()?;
    let stem = hex::encode(s.id.as_bytes());
    let record = PreparedRecord {
        id: s.id.clone(),
        split: s.split,
        source: text,
        target: s.target.clone(),
        has_audio: audio.is_some(),
        has_video: video.is_some(),
        audio_file: Path::new(FEATURE_DIR).join(format!("{stem}.audio.tnsr")),
        video_file: Path::new(FEATURE_DIR).join(format!("{stem}.video.tnsr")),
    };
    Ok(Extracted {
        record,
        audio: audio.unwrap_or_else(|| Tensor::zeros(&[1, MFCC_COEFFS])),
        video: video.unwrap_or_else(|| Tensor::zeros(&[1, VIDEO_FEATURE_DIM])),
    })
}

/// Extracts features for every sample and builds the vocabulary from the
/// train split's sources and targets. Failed samples are reported and left
/// out of the index. Output is deterministic, so re-running on unchanged
/// inputs leaves the directory byte-identical.
pub fn prepare(m: &Manifest, out: &Path, vocab_size: usize) -> Result<PrepareReport> {
    let features = out.join(FEATURE_DIR);
    std::fs::create_dir_all(&features).map_err(|e| AppError::io(format!("creating {}", features.display()), e))?;
    let mut report = PrepareReport::default();
    let mut records = Vec::new();
    for s in &m.samples {
        match extract(m, s) {
            Ok(x) => {
                write_if_changed(&out.join(&x.record.audio_file), &x.audio.to_bytes())?;
                write_if_changed(&out.join(&x.record.video_file), &x.video.to_bytes())?;
                records.push(x.record);
            }
            Err(e) => {
                log::error!("sample {} ({}): {e}", s.id, s.split);
                report.failures.push(Failure { id: s.id.clone(), split: s.split, reason: e.to_string() });
            }
        }
    }
    let corpus: Vec<&str> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| [r.source.as_str(), r.target.as_str()])
        .collect();
    if corpus.is_empty() {
        return Err(AppError::Data("no usable train samples to build a vocabulary from".into()));
    }
    let vocab = Vocabulary::build(corpus, vocab_size)?;
    write_if_changed(&out.join(VOCAB_FILE), vocab.to_text().as_bytes())?;
    let mut index = String::new();
    for r in &records {
        index.push_str(&serde_json::to_string(r).expect("records serialize"));
        index.push('\n');
    }
    write_if_changed(&out.join(INDEX_FILE), index.as_bytes())?;
    report.prepared = records.len();
    report.vocab_size = vocab.len();
    if !report.failures.is_empty() {
        log::warn!("{} of {} samples failed ({} in train)", report.failures.len(), m.samples.len(), report.train_failures());
    }
    Ok(report)
}
