//! The full summarizer: shared embeddings, the hyper-complex and latent
//! encoder streams, cross-modal fusion and the decoder.

use crate::autograd::Var;
use crate::decoder::{beam_search, greedy_decode, Decoder, Hypothesis, SearchConfig};
use crate::dfhc::DfhcEncoder;
use crate::error::{Error, Result};
use crate::features::audio::MFCC_COEFFS;
use crate::features::{ingest_video, project_audio, VIDEO_FEATURE_DIM};
use crate::fusion::{FusedMemory, Fusion, MemoryValue, Stream};
use crate::nn::{embed_tokens, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::nll_loss;
use crate::wret::{LatentState, WretEncoder, WretLoss};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Kronecker component count of the hyper-complex layers.
    pub components: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub latent_dim: usize,
    pub flow_layers: usize,
    pub audio_len: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    /// Generated-token cap at inference.
    pub max_decode_len: usize,
    /// Generated-token cap for training targets.
    pub max_target_len: usize,
    pub use_video: bool,
    pub use_audio: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            components: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            latent_dim: 64,
            flow_layers: 4,
            audio_len: 256,
            vocab_size: 4096,
            max_source_len: 512,
            max_decode_len: 40,
            max_target_len: 36,
            use_video: true,
            use_audio: true,
        }
    }
}

/// One tokenized sample with optional modality features.
#[derive(Clone, Debug)]
pub struct Example<T: Scalar = f64> {
    pub id: String,
    pub source: Vec<usize>,
    /// `BOS … EOS`; may be empty for inference-only inputs.
    pub target: Vec<usize>,
    /// MFCC frames `[T, 40]`; `None` when the sample has no audio.
    pub audio: Option<Tensor<T>>,
    /// Video blocks `[B, 2048]`; `None` when the sample has no video.
    pub video: Option<Tensor<T>>,
}

/// Encoder outputs for one sample.
pub struct Encoded {
    pub memory: FusedMemory,
    pub latent: Option<LatentState>,
}

/// Per-batch loss graph nodes.
pub struct BatchLoss {
    pub total: Var,
    pub nll: Var,
    pub wret: Option<WretLoss>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: ParamId,
    pub dfhc: DfhcEncoder,
    pub wret: WretEncoder,
    pub fusion: Fusion,
    pub audio_proj: Linear,
    pub video_proj: Linear,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, cfg: ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        if !cfg.use_video && !cfg.use_audio {
            return Err(Error::Config("at least one encoder stream must be enabled".into()));
        }
        let embed = store.add_normal("embeddings.tok", &[cfg.vocab_size, d], rng);
        let dfhc = DfhcEncoder::new(store, rng, cfg.encoder_layers, d, cfg.heads, cfg.ffn_mult, cfg.components)?;
        let wret = WretEncoder::new(store, rng, d, cfg.heads, cfg.ffn_mult, cfg.latent_dim, cfg.flow_layers)?;
        let fusion = Fusion::new(store, rng, d);
        // The video stream is one pooled row, so its attention weight is
        // always 1 and the query/key maps cannot affect the output.
        store.freeze(fusion.video.wq);
        store.freeze(fusion.video.wk);
        let audio_proj = Linear::new(store, rng, "fusion.audio_proj", MFCC_COEFFS, d, true);
        let video_proj = Linear::new(store, rng, "fusion.video_proj", VIDEO_FEATURE_DIM, d, true);
        let decoder = Decoder::new(
            store,
            rng,
            cfg.decoder_layers,
            d,
            cfg.heads,
            cfg.ffn_mult,
            cfg.vocab_size,
            cfg.max_decode_len + 1,
        )?;
        Ok(Self { cfg, embed, dfhc, wret, fusion, audio_proj, video_proj, decoder })
    }

    fn check_source(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.cfg.max_source_len {
            return Err(Error::InvalidArgument(format!(
                "source of {} tokens (limit {})",
                ids.len(),
                self.cfg.max_source_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Runs both encoder streams and fuses them. `noise` draws the latent
    /// sample; without it the posterior mean is used.
    pub fn encode<T: Scalar>(&self, g: &Graph<'_, T>, ex: &Example<T>, noise: Option<&mut SeededRng>) -> Result<Encoded> {
        self.check_source(&ex.source)?;
        let t = &g.tape;
        let d = self.cfg.d_model;

        let video = if self.cfg.use_video {
            let h = self.dfhc.encode(g, self.embed, &ex.source, None)?;
            let blocks = ex.video.clone().unwrap_or_else(|| Tensor::zeros(&[1, VIDEO_FEATURE_DIM]));
            let v = ingest_video(g, &self.video_proj, &blocks)?;
            Some(self.fusion.video.forward(g, h, v, None)?.out)
        } else {
            None
        };

        let mut latent = None;
        let audio = if self.cfg.use_audio {
            let x = embed_tokens(g, self.embed, &ex.source)?;
            let state = self.wret.encode_posterior(g, x, None, noise)?;
            let generated = self.wret.generate(g, state.z_prime)?;
            let h = self.wret.encode_states(g, state.states, generated)?;
            let (frames, valid) = match &ex.audio {
                Some(m) => {
                    let a = project_audio(g, &self.audio_proj, m, self.cfg.audio_len)?;
                    (a.frames, a.valid)
                }
                None => (t.constant(Tensor::zeros(&[self.cfg.audio_len, d])), 0),
            };
            let audio_mask: Vec<bool> = (0..self.cfg.audio_len).map(|i| i < valid).collect();
            latent = Some(state);
            Some(self.fusion.audio.forward(g, h, frames, Some(&audio_mask))?.out)
        } else {
            None
        };

        // Source positions of both streams are always valid.
        let text_mask = vec![true; ex.source.len()];
        let memory = self.fusion.fuse(
            g,
            video.map(|states| Stream { states, mask: &text_mask }),
            audio.map(|states| Stream { states, mask: &text_mask }),
        )?;
        Ok(Encoded { memory, latent })
    }

    /// Loss of a micro-batch: `mle_weight · mean NLL + latent objective`.
    /// `noise[i]` and the rows of `prior` belong to `batch[i]`.
    pub fn batch_loss<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        batch: &[&Example<T>],
        noise: Option<Vec<SeededRng>>,
        prior: &Tensor<T>,
        weights: &LossWeights,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let t = &g.tape;
        let mut nlls = Vec::with_capacity(batch.len());
        let mut latents = Vec::with_capacity(batch.len());
        let mut noise = noise.map(|v| v.into_iter());
        for ex in batch {
            let mut rng = noise.as_mut().and_then(|it| it.next());
            let enc = self.encode(g, ex, rng.as_mut())?;
            let logits = self.decoder.teacher_forced(g, self.embed, enc.memory.states, &enc.memory.mask, &ex.target)?;
            nlls.push(nll_loss(t, logits, &ex.target[1..])?);
            latents.extend(enc.latent);
        }
        let nll = if nlls.len() == 1 {
            nlls[0]
        } else {
            let stacked = t.concat_rows(&nlls.iter().map(|&v| t.reshape(v, &[1, 1])).collect::<Result<Vec<_>>>()?)?;
            t.mean_all(stacked)
        };
        let wret = if latents.is_empty() {
            None
        } else {
            Some(self.wret.objective(g, &latents, prior, T::lit(weights.lambda), T::lit(weights.alpha))?)
        };
        let total = crate::training::total_loss(t, nll, wret.as_ref().map(|w| w.total), T::lit(weights.mle_weight))?;
        Ok(BatchLoss { total, nll, wret })
    }

    /// Detached decoder memory for a sample, using the posterior mean.
    pub fn memory<T: Scalar>(&self, store: &ParamStore<T>, ex: &Example<T>) -> Result<MemoryValue<T>> {
        let g = Graph::inference(store);
        Ok(self.encode(&g, ex, None)?.memory.detach(&g))
    }

    /// Beam search (greedy when `beams == 1` without trigram blocking).
    pub fn summarize<T: Scalar>(&self, store: &ParamStore<T>, ex: &Example<T>, search: &SearchConfig) -> Result<Hypothesis> {
        let memory = self.memory(store, ex)?;
        let step = |prefix: &[usize]| Ok(self.decoder.decode_logits(store, self.embed, &memory, prefix)?.to_f64_vec());
        let cfg = SearchConfig { max_len: search.max_len.min(self.cfg.max_decode_len), ..search.clone() };
        beam_search(step, &cfg)
    }

    pub fn greedy<T: Scalar>(&self, store: &ParamStore<T>, ex: &Example<T>) -> Result<Vec<usize>> {
        let memory = self.memory(store, ex)?;
        let step = |prefix: &[usize]| Ok(self.decoder.decode_logits(store, self.embed, &memory, prefix)?.to_f64_vec());
        greedy_decode(step, self.cfg.max_decode_len)
    }
}

/// Mixture weights of the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub mle_weight: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Checkpoint segment a parameter belongs to, from its name prefix.
pub fn segment_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}
