//! Command implementations behind the CLI.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mtldr_core::checkpoint::Checkpoint;
use mtldr_core::eval::{corpus_report, CorpusReport};
use mtldr_core::training::{RunConfig, StepMetrics, Trainer};

use crate::dataset::{eval_sample, Prepared};
use crate::engine::{CorpusSummarizer, Engine, Inputs, SummaryModel};
use crate::error::{AppError, Result};
use crate::manifest::{load_manifest, Split};
use crate::prepare::{prepare, PrepareReport};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Reads a `key = value` config file (defaults without one) and applies a
/// seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Where prepared features live when no directory is given.
pub fn default_features_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join("prepared")
}

/// Prepares features; any failed train sample makes this a data error.
pub fn run_prepare(manifest: &Path, out: &Path, cfg: &RunConfig) -> Result<PrepareReport> {
    let m = load_manifest(manifest)?;
    let report = prepare(&m, out, cfg.model.vocab_size)?;
    let bad = report.train_failures();
    if bad > 0 {
        let ids: Vec<&str> = report.failures.iter().filter(|f| f.split == Split::Train).map(|f| f.id.as_str()).collect();
        return Err(AppError::Data(format!("{bad} train samples failed: {}", ids.join(", "))));
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: Option<StepMetrics>,
    /// Teacher-forced NLL on the train split after training.
    pub train_nll: f64,
    pub out: PathBuf,
}

/// Trains on the prepared train split, validating on the valid split.
/// With `resume`, continues from `last.ckpt` in `out`.
pub fn run_train(
    cfg: RunConfig,
    prepared: &Prepared,
    out: &Path,
    resume: bool,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let vocab = prepared.vocab()?;
    let mut trainer = if resume {
        let path = out.join(LAST_CHECKPOINT);
        if !path.exists() {
            return Err(AppError::Config(format!("nothing to resume: {} is missing", path.display())));
        }
        Trainer::from_checkpoint(Checkpoint::load(&path)?)?
    } else {
        let mut cfg = cfg;
        cfg.model.vocab_size = vocab.len();
        cfg.validate().map_err(|e| AppError::Config(format!("{e} (prepared vocabulary has {} tokens)", vocab.len())))?;
        let metrics = out.join(METRICS_FILE);
        if metrics.exists() {
            std::fs::remove_file(&metrics).map_err(|e| AppError::io(format!("removing {}", metrics.display()), e))?;
        }
        Trainer::new(cfg, Some(vocab.clone()))?
    };
    let model_cfg = trainer.cfg.model.clone();
    let train = prepared.examples(prepared.split(Split::Train), &vocab, &model_cfg)?;
    let valid = prepared.examples(prepared.split(Split::Valid), &vocab, &model_cfg)?;
    if train.is_empty() {
        return Err(AppError::Data("prepared corpus has no train samples".into()));
    }
    log::info!("training on {} samples, validating on {}", train.len(), valid.len());
    let history = trainer.fit(&train, &valid, Some(out), &mut on_step)?;
    let train_nll = trainer.eval_nll(&train)?;
    Ok(TrainOutcome { steps: trainer.state.step, last: history.last().cloned(), train_nll, out: out.to_path_buf() })
}

/// ROUGE and corpus statistics of `engine` over every prepared sample.
pub fn run_evaluate(engine: &Engine, prepared: &Prepared) -> Result<CorpusReport> {
    let cfg = &engine.config.model;
    let mut examples = HashMap::new();
    for r in &prepared.records {
        examples.insert(r.id.clone(), prepared.example(r, &engine.vocab, cfg)?);
    }
    let samples: Vec<_> = prepared.records.iter().map(eval_sample).collect();
    let summarizer = CorpusSummarizer { engine, examples };
    Ok(corpus_report(&samples, Some(&summarizer))?)
}

pub fn read_inputs(text: &Path, audio: Option<&Path>, video: Option<&Path>) -> Result<Inputs> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| AppError::Data(format!("cannot read {}: {e}", p.display())));
    Ok(Inputs { text: read(text)?, audio: audio.map(read).transpose()?, video: video.map(read).transpose()? })
}

pub fn run_summarize(engine: &Engine, inputs: &Inputs) -> Result<(String, Duration)> {
    let start = Instant::now();
    let summary = engine.summarize(inputs)?;
    Ok((summary, start.elapsed()))
}
