//! Hyper-complex (Kronecker-sum) layers and the text encoder built on them.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{embed_tokens, EncoderBlock, Proj};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{kron, Tensor};

/// Linear layer whose weight is `H = Σᵢ Pᵢ ⊗ Qᵢ`, with `Pᵢ: n×n` and
/// `Qᵢ: (d_out/n)×(d_in/n)`, computing `x·Hᵀ + b`.
#[derive(Clone, Debug)]
pub struct HclLayer {
    pub n: usize,
    pub p: Vec<ParamId>,
    pub q: Vec<ParamId>,
    pub b: ParamId,
    d_in: usize,
    d_out: usize,
}

/// Weight count of one HCL layer without its bias: `n³ + d_in·d_out/n`.
pub fn hcl_weight_count(d_in: usize, d_out: usize, n: usize) -> usize {
    n * n * n + d_in * d_out / n
}

impl HclLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        n: usize,
    ) -> Result<Self> {
        if n == 0 || d_in % n != 0 || d_out % n != 0 {
            return Err(shape_err!("HCL component count {n} must divide {d_in} and {d_out}"));
        }
        let p = (0..n).map(|i| store.add_normal(format!("{name}.p{i}"), &[n, n], rng)).collect();
        let q = (0..n)
            .map(|i| store.add_normal(format!("{name}.q{i}"), &[d_out / n, d_in / n], rng))
            .collect();
        let b = store.add_zeros(format!("{name}.b"), &[d_out]);
        Ok(Self { n, p, q, b, d_in, d_out })
    }

    pub fn weight_count(&self) -> usize {
        hcl_weight_count(self.d_in, self.d_out, self.n)
    }

    /// `H` as a dense `[d_out, d_in]` matrix.
    pub fn materialize<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut acc = vec![T::zero(); self.d_out * self.d_in];
        for (&p, &q) in self.p.iter().zip(&self.q) {
            let k = kron(store.get(p), store.get(q))?;
            acc.iter_mut().zip(k.data()).for_each(|(a, &v)| *a += v);
        }
        Tensor::new(&[self.d_out, self.d_in], acc)
    }
}

impl<T: Scalar> Proj<T> for HclLayer {
    fn build(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize, n: usize) -> Result<Self> {
        HclLayer::new(store, rng, name, d_in, d_out, n)
    }

    /// Blockwise evaluation: split each row into `n` chunks, map every chunk
    /// through `Qᵢ`, then mix chunks with `Pᵢ`. `H` is never formed.
    fn forward(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let t = &g.tape;
        let shape = t.shape(x);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(shape_err!("HCL expects [T, {}], got {:?}", self.d_in, shape));
        }
        let (rows, n) = (shape[0], self.n);
        let chunks = t.reshape(x, &[rows * n, self.d_in / n])?;
        let mut acc = None;
        for (&p, &q) in self.p.iter().zip(&self.q) {
            let z = t.matmul(chunks, t.transpose(g.p(q))?)?;
            let z = t.reshape(z, &[rows, n, self.d_out / n])?;
            let y = t.matmul(g.p(p), z)?;
            acc = Some(match acc {
                None => y,
                Some(a) => t.add(a, y)?,
            });
        }
        let y = t.reshape(acc.expect("n ≥ 1"), &[rows, self.d_out])?;
        t.add_bias(y, g.p(self.b))
    }

    fn dense(&self, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.materialize(store)?.transpose()?, store.get(self.b).clone()))
    }

    fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }
}

pub type DfhcBlock = EncoderBlock<HclLayer>;

/// Stack of hyper-complex encoder blocks over token embeddings.
#[derive(Clone, Debug)]
pub struct DfhcEncoder {
    pub blocks: Vec<DfhcBlock>,
}

impl DfhcEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        depth: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        n: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| DfhcBlock::new(store, rng, &format!("dfhc.block{i}"), d, heads, ffn_mult, n))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Embeds `ids` (plus positions) and runs every block. `mask` marks
    /// non-pad positions.
    pub fn encode<T: Scalar>(&self, g: &Graph<'_, T>, embed: ParamId, ids: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let mut x = embed_tokens(g, embed, ids)?;
        for b in &self.blocks {
            x = b.forward(g, x, mask)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        assert!(HclLayer::new(&mut store, &mut rng, "h", 6, 8, 4).is_err());
    }

    #[test]
    fn count_formula_at_full_width() {
        assert_eq!(hcl_weight_count(512, 512, 4), 65_600);
        assert_eq!(4 * (16 + 128 * 128), 65_600);
    }
}
