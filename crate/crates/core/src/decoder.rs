//! Autoregressive decoder over the fused memory, with greedy and beam
//! search.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::fusion::MemoryValue;
use crate::nn::{embed_tokens, multi_head_attention, LayerNorm, Linear, Proj};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokens::{BOS, EOS, PAD};

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_o: Linear,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d: usize, ffn_mult: usize) -> Self {
        let mut lin = |part: &str, i: usize, o: usize| Linear::new(store, rng, &format!("{name}.{part}"), i, o, true);
        let self_q = lin("self.q", d, d);
        let self_k = lin("self.k", d, d);
        let self_v = lin("self.v", d, d);
        let self_o = lin("self.o", d, d);
        let cross_q = lin("cross.q", d, d);
        let cross_k = lin("cross.k", d, d);
        let cross_v = lin("cross.v", d, d);
        let cross_o = lin("cross.o", d, d);
        let ff1 = lin("ffn.in", d, ffn_mult * d);
        let ff2 = lin("ffn.out", ffn_mult * d, d);
        Self {
            self_q,
            self_k,
            self_v,
            self_o,
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            ff1,
            ff2,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    /// Returns the block output and the cross-attention weights per head.
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, memory: Var, mem_mask: &[bool], heads: usize) -> Result<(Var, Vec<Var>)> {
        let t = &g.tape;
        let (q, k, v) = (self.self_q.forward(g, x)?, self.self_k.forward(g, x)?, self.self_v.forward(g, x)?);
        let sa = multi_head_attention(t, q, k, v, heads, None, true)?;
        let h = self.ln1.forward(g, t.add(x, self.self_o.forward(g, sa.out)?)?)?;

        let q = self.cross_q.forward(g, h)?;
        let (k, v) = (self.cross_k.forward(g, memory)?, self.cross_v.forward(g, memory)?);
        let ca = multi_head_attention(t, q, k, v, heads, Some(mem_mask), false)?;
        let h = self.ln2.forward(g, t.add(h, self.cross_o.forward(g, ca.out)?)?)?;

        let f = self.ff2.forward(g, t.relu(self.ff1.forward(g, h)?))?;
        Ok((self.ln3.forward(g, t.add(h, f)?)?, ca.weights))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub out: Linear,
    pub heads: usize,
    pub vocab: usize,
    /// Longest prefix accepted by [`Decoder::forward`].
    pub max_len: usize,
}

/// Decoder activations for one prefix.
pub struct DecoderPass {
    /// `[T, vocab]`, or `[1, vocab]` when only the last row was projected.
    pub logits: Var,
    /// Cross-attention weights, per block then per head, each `[T, M]`.
    pub cross_weights: Vec<Vec<Var>>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        depth: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        vocab: usize,
        max_len: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} not divisible into {heads} heads"));
        }
        let blocks = (0..depth)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.block{i}"), d, ffn_mult))
            .collect();
        let out = Linear::new(store, rng, "decoder.out", d, vocab, true);
        Ok(Self { blocks, out, heads, vocab, max_len })
    }

    /// Causally masked pass over `prefix`. With `last_only`, only the final
    /// position is projected to the vocabulary.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        embed: ParamId,
        memory: Var,
        mem_mask: &[bool],
        prefix: &[usize],
        last_only: bool,
    ) -> Result<DecoderPass> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
        }
        if prefix.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of {} tokens exceeds the limit of {}",
                prefix.len(),
                self.max_len
            )));
        }
        let mut x = embed_tokens(g, embed, prefix)?;
        let mut cross_weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, w) = b.forward(g, x, memory, mem_mask, self.heads)?;
            x = y;
            cross_weights.push(w);
        }
        if last_only {
            x = g.tape.slice_rows(x, prefix.len() - 1, 1)?;
        }
        let logits = self.out.forward(g, x)?;
        Ok(DecoderPass { logits, cross_weights })
    }

    /// Logits `[L−1, vocab]` where row `i` predicts `target[i+1]` from
    /// `target[..=i]`. The target must start with BOS and end with EOS.
    pub fn teacher_forced<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        embed: ParamId,
        memory: Var,
        mem_mask: &[bool],
        target: &[usize],
    ) -> Result<Var> {
        if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
            return Err(Error::InvalidArgument("target must be BOS … EOS with at least one step".into()));
        }
        Ok(self.forward(g, embed, memory, mem_mask, &target[..target.len() - 1], false)?.logits)
    }

    /// Next-token logits after `prefix`, on a fresh inference graph.
    pub fn decode_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        embed: ParamId,
        memory: &MemoryValue<T>,
        prefix: &[usize],
    ) -> Result<Tensor<T>> {
        let g = Graph::inference(store);
        let mem = g.tape.constant(memory.states.clone());
        let pass = self.forward(&g, embed, mem, &memory.mask, prefix, true)?;
        g.tape.value(pass.logits).reshape(&[self.vocab])
    }
}

/// Search settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beams: usize,
    /// Maximum number of generated tokens after BOS.
    pub max_len: usize,
    pub block_trigrams: bool,
    pub length_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { beams: 4, max_len: 40, block_trigrams: true, length_penalty: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of generated tokens (BOS excluded).
    pub fn generated(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    pub fn normalized(&self, length_penalty: f64) -> f64 {
        normalized_score(self.score, self.generated(), length_penalty)
    }
}

pub fn normalized_score(score: f64, generated: usize, length_penalty: f64) -> f64 {
    score / (generated.max(1) as f64).powf(length_penalty)
}

/// Log-softmax of a logit vector in `f64`.
pub fn log_probs<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    xs.iter().map(|v| v - lse).collect()
}

/// Whether appending `next` would create a trigram already present in `ids`.
pub fn repeats_trigram(ids: &[usize], next: usize) -> bool {
    let n = ids.len();
    if n < 2 {
        return false;
    }
    let tri = [ids[n - 2], ids[n - 1], next];
    ids.windows(3).any(|w| w == tri)
}

/// Tokens the search may emit: everything except PAD and BOS.
pub fn is_emittable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Argmax decoding (ties to the lowest id) until EOS or `max_len` tokens.
pub fn greedy_decode<F>(mut step: F, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut ids = vec![BOS];
    for _ in 0..max_len {
        let lp = log_probs(&step(&ids)?);
        let mut best: Option<(usize, f64)> = None;
        for (tok, &v) in lp.iter().enumerate() {
            if is_emittable(tok) && best.map_or(true, |(_, b)| v > b) {
                best = Some((tok, v));
            }
        }
        let Some((tok, _)) = best else { break };
        ids.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Beam search over next-token logits produced by `step`.
///
/// Each step keeps the `beams` best extensions of all live hypotheses;
/// extensions ending in EOS move to the finished pool. The result is the
/// finished hypothesis with the best length-normalized score, or the best
/// live one when nothing finished within `max_len` tokens.
pub fn beam_search<F>(mut step: F, cfg: &SearchConfig) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if cfg.beams == 0 {
        return Err(Error::InvalidArgument("beam count must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis { ids: vec![BOS], score: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let lp = log_probs(&step(&hyp.ids)?);
            for (tok, &v) in lp.iter().enumerate() {
                if !is_emittable(tok) || (cfg.block_trigrams && repeats_trigram(&hyp.ids, tok)) {
                    continue;
                }
                cands.push((hyp.score + v, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beams);
        let mut next = Vec::with_capacity(cands.len());
        for (score, h, tok) in cands {
            let mut ids = alive[h].ids.clone();
            ids.push(tok);
            let done = tok == EOS;
            let hyp = Hypothesis { ids, score, finished: done };
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let pick = |pool: Vec<Hypothesis>| {
        pool.into_iter().fold(None::<Hypothesis>, |best, h| match best {
            Some(b) if b.normalized(cfg.length_penalty) >= h.normalized(cfg.length_penalty) => Some(b),
            _ => Some(h),
        })
    };
    if let Some(best) = pick(finished) {
        return Ok(best);
    }
    pick(alive).ok_or_else(|| Error::InvalidArgument("search produced no hypothesis".into()))
}

/// Exhaustive search under the same rules and scoring as [`beam_search`]:
/// every emittable sequence of at most `max_len` tokens.
pub fn exhaustive_search<F>(mut step: F, cfg: &SearchConfig) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut finished = Vec::new();
    let mut unfinished = Vec::new();
    let mut stack = vec![Hypothesis { ids: vec![BOS], score: 0.0, finished: false }];
    while let Some(hyp) = stack.pop() {
        if hyp.generated() == cfg.max_len {
            unfinished.push(hyp);
            continue;
        }
        let lp = log_probs(&step(&hyp.ids)?);
        for (tok, &v) in lp.iter().enumerate() {
            if !is_emittable(tok) || (cfg.block_trigrams && repeats_trigram(&hyp.ids, tok)) {
                continue;
            }
            let mut ids = hyp.ids.clone();
            ids.push(tok);
            let h = Hypothesis { ids, score: hyp.score + v, finished: tok == EOS };
            if h.finished {
                finished.push(h);
            } else {
                stack.push(h);
            }
        }
    }
    let pool = if finished.is_empty() { unfinished } else { finished };
    pool.into_iter()
        .max_by(|a, b| {
            a.normalized(cfg.length_penalty)
                .partial_cmp(&b.normalized(cfg.length_penalty))
                .unwrap_or(Ordering::Equal)
        })
        .ok_or_else(|| Error::InvalidArgument("search produced no hypothesis".into()))
}

/// Distinct trigrams check used by tests and reports.
pub fn has_repeated_trigram(ids: &[usize]) -> bool {
    let mut seen = HashSet::new();
    ids.windows(3).any(|w| !seen.insert([w[0], w[1], w[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigram_detection() {
        assert!(repeats_trigram(&[1, 4, 4, 4], 4));
        assert!(!repeats_trigram(&[1, 4, 4], 4));
        assert!(has_repeated_trigram(&[1, 4, 4, 4, 4]));
        assert!(!has_repeated_trigram(&[1, 4, 4, 4, 3]));
    }

    #[test]
    fn length_normalization() {
        assert_eq!(normalized_score(-2.0, 1, 0.7), -2.0);
        assert!((normalized_score(-4.0, 4, 0.5) + 2.0).abs() < 1e-15);
    }
}
