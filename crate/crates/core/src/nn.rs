//! Layers shared by the encoders, fusion and decoder.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// A learned map from `d_in` to `d_out` features applied row-wise.
pub trait Proj<T: Scalar>: Clone + std::fmt::Debug {
    /// `n` is the Kronecker component count; dense layers ignore it.
    fn build(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize, n: usize) -> Result<Self>;
    fn forward(&self, g: &Graph<'_, T>, x: Var) -> Result<Var>;
    /// Equivalent dense weight `[d_in, d_out]` and bias `[d_out]`.
    fn dense(&self, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)>;
    fn dims(&self) -> (usize, usize);
}

/// Affine layer `x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn from_tensors<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>, b: Option<Tensor<T>>) -> Result<Self> {
        let (d_in, d_out) = w.dims2()?;
        if let Some(b) = &b {
            if b.len() != d_out {
                return Err(shape_err!("bias {:?} for weight {:?}", b.shape(), w.shape()));
            }
        }
        let w = store.add(format!("{name}.w"), w);
        let b = b.map(|b| store.add(format!("{name}.b"), b));
        Ok(Self { w, b, d_in, d_out })
    }
}

impl<T: Scalar> Proj<T> for Linear {
    fn build(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize, _n: usize) -> Result<Self> {
        Ok(Linear::new(store, rng, name, d_in, d_out, true))
    }

    fn forward(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.tape.matmul(x, g.p(self.w))?;
        match self.b {
            Some(b) => g.tape.add_bias(y, g.p(b)),
            None => Ok(y),
        }
    }

    fn dense(&self, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.b.map_or_else(|| Tensor::zeros(&[self.d_out]), |b| store.get(b).clone());
        Ok((store.get(self.w).clone(), b))
    }

    fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[d]),
            bias: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.tape.layer_norm(x, g.p(self.gain), g.p(self.bias), T::lit(LN_EPS))
    }
}

/// Output of [`multi_head_attention`]: the concatenated heads and each
/// head's attention matrix.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` column groups.
///
/// `key_mask[j] == false` removes key `j`; `causal` additionally removes
/// keys after the query position.
pub fn multi_head_attention<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<Attended> {
    let qs = tape.shape(q);
    let ks = tape.shape(k);
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || tape.shape(v) != ks {
        return Err(shape_err!("attention shapes q {:?}, k {:?}, v {:?}", qs, ks, tape.shape(v)));
    }
    let (tq, d) = (qs[0], qs[1]);
    let tk = ks[0];
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("width {d} not divisible into {heads} heads"));
    }
    if let Some(m) = key_mask {
        if m.len() != tk {
            return Err(shape_err!("key mask of length {} for {tk} keys", m.len()));
        }
    }
    let mask: Option<Vec<bool>> = (key_mask.is_some() || causal).then(|| {
        (0..tq * tk)
            .map(|idx| {
                let (r, c) = (idx / tk, idx % tk);
                key_mask.map_or(true, |m| m[c]) && (!causal || c <= r)
            })
            .collect()
    });
    let dk = d / heads;
    let scale = T::one() / T::from_usize_lossy(dk).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale);
        let a = tape.softmax_masked(scores, mask.as_deref())?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(Attended { out, weights })
}

/// Self-attention plus feed-forward block with post-norm residuals,
/// generic over the projection type.
#[derive(Clone, Debug)]
pub struct EncoderBlock<P> {
    pub q: P,
    pub k: P,
    pub v: P,
    pub o: P,
    pub ff1: P,
    pub ff2: P,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl<P> EncoderBlock<P> {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        n: usize,
    ) -> Result<Self>
    where
        P: Proj<T>,
    {
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} not divisible into {heads} heads"));
        }
        Ok(Self {
            q: P::build(store, rng, &format!("{name}.attn.q"), d, d, n)?,
            k: P::build(store, rng, &format!("{name}.attn.k"), d, d, n)?,
            v: P::build(store, rng, &format!("{name}.attn.v"), d, d, n)?,
            o: P::build(store, rng, &format!("{name}.attn.o"), d, d, n)?,
            ff1: P::build(store, rng, &format!("{name}.ffn.in"), d, ffn_mult * d, n)?,
            ff2: P::build(store, rng, &format!("{name}.ffn.out"), ffn_mult * d, d, n)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            heads,
        })
    }

    /// `LN(x + O·concat_h(A_h V_h))` together with the per-head weights.
    pub fn attention<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, mask: Option<&[bool]>) -> Result<Attended>
    where
        P: Proj<T>,
    {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let att = multi_head_attention(&g.tape, q, k, v, self.heads, mask, false)?;
        let proj = self.o.forward(g, att.out)?;
        let out = self.ln1.forward(g, g.tape.add(x, proj)?)?;
        Ok(Attended { out, weights: att.weights })
    }

    /// `LN(x + F₂(ReLU(F₁ x)))`.
    pub fn ffn<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var>
    where
        P: Proj<T>,
    {
        let h = g.tape.relu(self.ff1.forward(g, x)?);
        let y = self.ff2.forward(g, h)?;
        self.ln2.forward(g, g.tape.add(x, y)?)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, mask: Option<&[bool]>) -> Result<Var>
    where
        P: Proj<T>,
    {
        let h = self.attention(g, x, mask)?.out;
        self.ffn(g, h)
    }

    pub fn projections(&self) -> [&P; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2]
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, d], data).expect("valid shape")
}

/// Token embedding rows plus positions.
pub fn embed_tokens<T: Scalar>(g: &Graph<'_, T>, table: ParamId, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(crate::error::Error::InvalidArgument("empty token sequence".into()));
    }
    let d = g.params().get(table).last_dim();
    let e = g.tape.gather_rows(g.p(table), ids)?;
    let pe = g.tape.constant(positional_encoding(ids.len(), d));
    g.tape.add(e, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_rows() {
        let pe: Tensor = positional_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[1, 3]) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = SeededRng::new(1);
        let x: Tensor = rng.normal_tensor(&[4, 6], 1.0);
        let mut y = x.clone();
        y.data_mut()[3 * 6..].iter_mut().for_each(|v| *v += 5.0);
        let run = |t: Tensor| {
            let tape = Tape::new();
            let v = tape.constant(t);
            let a = multi_head_attention(&tape, v, v, v, 2, None, true).unwrap();
            tape.value(a.out)
        };
        let (a, b) = (run(x), run(y));
        assert_eq!(&a.data()[..18], &b.data()[..18]);
    }
}
