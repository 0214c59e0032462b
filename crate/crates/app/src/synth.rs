//! Small synthetic multimodal corpora for smoke tests and demos.

use std::path::{Path, PathBuf};

use mtldr_core::features::VIDEO_FEATURE_DIM;
use mtldr_core::{SeededRng, Tensor};

use crate::error::{AppError, Result};
use crate::manifest::{to_jsonl, Metadata, SampleManifest, Split};
use crate::wav::encode_wav;

const TOPICS: [&str; 10] = [
    "graph neural networks",
    "protein folding",
    "speech recognition",
    "image segmentation",
    "reinforcement learning",
    "machine translation",
    "causal inference",
    "federated learning",
    "question answering",
    "video captioning",
];

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub samples: usize,
    pub seed: u64,
    pub video_blocks: usize,
    pub audio_rate: u32,
    pub audio_samples: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { samples: 10, seed: 0, video_blocks: 3, audio_rate: 16_000, audio_samples: 8_000 }
    }
}

pub fn source_text(i: usize) -> String {
    let topic = TOPICS[i % TOPICS.len()];
    format!(
        "in this talk we present a new method for {topic} that improves accuracy on standard benchmarks \
         while using fewer parameters and we discuss results number {i}"
    )
}

pub fn target_text(i: usize) -> String {
    format!("a new {} method with fewer parameters", TOPICS[i % TOPICS.len()])
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(format!("writing {}", path.display()), e))
}

/// Writes texts, sine-tone WAVs, random video feature blocks and a
/// manifest (all samples in the train split). Returns the manifest path.
pub fn write_corpus(dir: &Path, opts: &SynthOptions) -> Result<PathBuf> {
    for sub in ["text", "audio", "video"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| AppError::io(format!("creating {}", d.display()), e))?;
    }
    let mut rng = SeededRng::new(opts.seed);
    let mut samples = Vec::with_capacity(opts.samples);
    for i in 0..opts.samples {
        let id = format!("s{i:03}");
        let text_path = PathBuf::from(format!("text/{id}.txt"));
        let audio_path = PathBuf::from(format!("audio/{id}.wav"));
        let video_path = PathBuf::from(format!("video/{id}.tnsr"));
        write(&dir.join(&text_path), source_text(i).as_bytes())?;

        let freq = 200.0 + 50.0 * i as f64;
        let rate = opts.audio_rate as f64;
        let tone: Vec<f64> =
            (0..opts.audio_samples).map(|n| 0.5 * (std::f64::consts::TAU * freq * n as f64 / rate).sin()).collect();
        write(&dir.join(&audio_path), &encode_wav(&tone, opts.audio_rate))?;

        let video: Tensor = rng.normal_tensor(&[opts.video_blocks, VIDEO_FEATURE_DIM], 1.0);
        write(&dir.join(&video_path), &video.to_bytes())?;

        samples.push(SampleManifest {
            id,
            text_path,
            audio_path: Some(audio_path),
            video_feat_path: Some(video_path),
            target: target_text(i),
            split: Split::Train,
            metadata: Metadata {
                title: format!("talk {i}"),
                authors: vec!["synthetic".into()],
                keywords: vec![TOPICS[i % TOPICS.len()].into()],
                venue: "synthetic".into(),
                year: Some(2020),
            },
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write(&manifest, to_jsonl(&samples).as_bytes())?;
    Ok(manifest)
}
