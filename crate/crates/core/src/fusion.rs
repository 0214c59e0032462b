//! Cross-modal attention and assembly of the decoder memory.

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{multi_head_attention, LayerNorm};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-head attention with text queries and modality keys/values:
/// `softmax(X_t W_q (X_m W_k)ᵀ / √d) · X_m W_v`, then `LN(x_text + ·)`.
#[derive(Clone, Debug)]
pub struct CrossModal {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln: LayerNorm,
    pub d: usize,
    pub d_mod: usize,
}

pub struct CrossOut {
    pub out: Var,
    /// Attention matrix `[T, S]`.
    pub weights: Var,
}

impl CrossModal {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d: usize, d_mod: usize) -> Self {
        Self {
            wq: store.add_normal(format!("{name}.wq"), &[d, d], rng),
            wk: store.add_normal(format!("{name}.wk"), &[d_mod, d], rng),
            wv: store.add_normal(format!("{name}.wv"), &[d_mod, d], rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            d,
            d_mod,
        }
    }

    /// `key_mask` marks the modality rows that carry signal; when every row
    /// is masked the attention term is zero and only the residual remains.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x_text: Var, x_mod: Var, key_mask: Option<&[bool]>) -> Result<CrossOut> {
        let t = &g.tape;
        let (ts, ms) = (t.shape(x_text), t.shape(x_mod));
        if ts.len() != 2 || ts[1] != self.d || ms.len() != 2 || ms[1] != self.d_mod || ms[0] == 0 {
            return Err(shape_err!(
                "cross attention expects [T, {}] and [S, {}], got {:?} and {:?}",
                self.d,
                self.d_mod,
                ts,
                ms
            ));
        }
        let q = t.matmul(x_text, g.p(self.wq))?;
        let k = t.matmul(x_mod, g.p(self.wk))?;
        let v = t.matmul(x_mod, g.p(self.wv))?;
        let att = multi_head_attention(t, q, k, v, 1, key_mask, false)?;
        let out = self.ln.forward(g, t.add(x_text, att.out)?)?;
        Ok(CrossOut { out, weights: att.weights[0] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    /// Hyper-complex text stream after video cross-attention.
    Video,
    /// Latent text stream after audio cross-attention.
    Audio,
}

/// Time-concatenated encoder states handed to the decoder.
#[derive(Clone, Debug)]
pub struct FusedMemory {
    pub states: Var,
    pub tags: Vec<StreamTag>,
    /// `true` for positions the decoder may attend to.
    pub mask: Vec<bool>,
}

/// A stream entering [`Fusion::fuse`]: states `[T, d]` and their pad mask.
pub struct Stream<'m> {
    pub states: Var,
    pub mask: &'m [bool],
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub video: CrossModal,
    pub audio: CrossModal,
    pub tag_video: ParamId,
    pub tag_audio: ParamId,
    pub d: usize,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, d: usize) -> Self {
        Self {
            video: CrossModal::new(store, rng, "fusion.video", d, d),
            audio: CrossModal::new(store, rng, "fusion.audio", d, d),
            tag_video: store.add_normal("fusion.tag.video", &[d], rng),
            tag_audio: store.add_normal("fusion.tag.audio", &[d], rng),
            d,
        }
    }

    /// Adds each stream's tag vector and concatenates along time, video
    /// stream first. Either stream may be absent, not both.
    pub fn fuse<T: Scalar>(&self, g: &Graph<'_, T>, video: Option<Stream<'_>>, audio: Option<Stream<'_>>) -> Result<FusedMemory> {
        let t = &g.tape;
        let mut parts = Vec::new();
        let mut tags = Vec::new();
        let mut mask = Vec::new();
        for (stream, tag, id) in [(video, StreamTag::Video, self.tag_video), (audio, StreamTag::Audio, self.tag_audio)] {
            let Some(s) = stream else { continue };
            let shape = t.shape(s.states);
            if shape.len() != 2 || shape[1] != self.d || s.mask.len() != shape[0] {
                return Err(shape_err!("stream {:?} with mask of length {}", shape, s.mask.len()));
            }
            parts.push(t.add_bias(s.states, g.p(id))?);
            tags.extend(std::iter::repeat(tag).take(shape[0]));
            mask.extend_from_slice(s.mask);
        }
        let states = match parts.len() {
            0 => return Err(Error::InvalidArgument("both encoder streams are disabled".into())),
            1 => parts[0],
            _ => t.concat_rows(&parts)?,
        };
        Ok(FusedMemory { states, tags, mask })
    }
}

/// Memory detached from any tape, for step-by-step decoding.
#[derive(Clone, Debug)]
pub struct MemoryValue<T: Scalar = f64> {
    pub states: Tensor<T>,
    pub mask: Vec<bool>,
}

impl FusedMemory {
    pub fn detach<T: Scalar>(&self, g: &Graph<'_, T>) -> MemoryValue<T> {
        MemoryValue { states: g.tape.value(self.states), mask: self.mask.clone() }
    }
}
