use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoder::SearchConfig;
use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub accum_steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub mle_weight: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Optimizer step cap; 0 means no cap.
    pub max_steps: u64,
    /// Reserved; no objective uses it.
    pub ranking_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 55,
            accum_steps: 5,
            batch_size: 4,
            max_lr: 3e-5,
            warmup_steps: 10_000,
            mle_weight: 0.1,
            lambda: 18.0,
            alpha: 0.1,
            seed: 0,
            patience: 5,
            max_steps: 0,
            ranking_margin: 0.001,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { mle_weight: self.mle_weight, lambda: self.lambda, alpha: self.alpha }
    }
}

/// Everything a run needs: model shape, optimization and decoding.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.search);
        match key {
            "d_model" => m.d_model = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "components" => m.components = parse(key, v)?,
            "encoder_layers" => m.encoder_layers = parse(key, v)?,
            "decoder_layers" => m.decoder_layers = parse(key, v)?,
            "ffn_mult" => m.ffn_mult = parse(key, v)?,
            "latent_dim" => m.latent_dim = parse(key, v)?,
            "flow_layers" => m.flow_layers = parse(key, v)?,
            "audio_len" => m.audio_len = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "max_source_len" => m.max_source_len = parse(key, v)?,
            "max_decode_len" => m.max_decode_len = parse(key, v)?,
            "max_target_len" => m.max_target_len = parse(key, v)?,
            "use_video" => m.use_video = parse(key, v)?,
            "use_audio" => m.use_audio = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "accum_steps" => t.accum_steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_lr" => t.max_lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "mle_weight" => t.mle_weight = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "max_steps" => t.max_steps = parse(key, v)?,
            "ranking_margin" => t.ranking_margin = parse(key, v)?,
            "beams" => s.beams = parse(key, v)?,
            "length_penalty" => s.length_penalty = parse(key, v)?,
            "block_trigrams" => s.block_trigrams = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (m, t) = (&self.model, &self.train);
        let bad = |why: &str| Err(Error::Config(why.to_string()));
        let positive = [
            m.d_model,
            m.heads,
            m.components,
            m.ffn_mult,
            m.latent_dim,
            m.audio_len,
            m.max_source_len,
            m.max_decode_len,
            m.max_target_len,
            t.epochs,
            t.accum_steps,
            t.batch_size,
            self.search.beams,
        ];
        if positive.contains(&0) || t.warmup_steps == 0 {
            return bad("sizes, counts and warmup_steps must be positive");
        }
        if m.d_model % m.heads != 0 || m.d_model % m.components != 0 {
            return bad("d_model must be divisible by heads and components");
        }
        if m.vocab_size < crate::features::bpe::MIN_VOCAB_SIZE {
            return bad("vocab_size must be at least 64");
        }
        if !m.use_video && !m.use_audio {
            return bad("at least one of use_video and use_audio must be true");
        }
        if m.max_target_len > m.max_decode_len {
            return bad("max_target_len cannot exceed max_decode_len");
        }
        for (name, v) in [("max_lr", t.max_lr), ("mle_weight", t.mle_weight)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lambda", t.lambda), ("alpha", t.alpha), ("length_penalty", self.search.length_penalty)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.search);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("components", m.components.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("ffn_mult", m.ffn_mult.to_string());
        kv("latent_dim", m.latent_dim.to_string());
        kv("flow_layers", m.flow_layers.to_string());
        kv("audio_len", m.audio_len.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_source_len", m.max_source_len.to_string());
        kv("max_decode_len", m.max_decode_len.to_string());
        kv("max_target_len", m.max_target_len.to_string());
        kv("use_video", m.use_video.to_string());
        kv("use_audio", m.use_audio.to_string());
        kv("epochs", t.epochs.to_string());
        kv("accum_steps", t.accum_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_lr", t.max_lr.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("mle_weight", t.mle_weight.to_string());
        kv("lambda", t.lambda.to_string());
        kv("alpha", t.alpha.to_string());
        kv("seed", t.seed.to_string());
        kv("patience", t.patience.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("ranking_margin", t.ranking_margin.to_string());
        kv("beams", s.beams.to_string());
        kv("length_penalty", s.length_penalty.to_string());
        kv("block_trigrams", s.block_trigrams.to_string());
        out
    }
}
