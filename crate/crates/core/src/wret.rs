//! Variational sequence encoder with planar-flow transport and an MMD
//! penalty against a standard normal prior.

use std::fmt;
use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{EncoderBlock, Linear, Proj};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;
/// Lower bound kept on `wᵀu` so every planar layer stays invertible.
pub const INVERTIBILITY_MARGIN: f64 = 1e-6;
const MIN_ABS_DET: f64 = 1e-12;

/// Position-dependent inner product on the latent space.
#[derive(Clone)]
pub enum RiemannianMetric<T: Scalar = f64> {
    Identity,
    Diagonal(Vec<T>),
    Field(Arc<dyn Fn(&[T]) -> Tensor<T> + Send + Sync>),
}

impl<T: Scalar> fmt::Debug for RiemannianMetric<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "Identity"),
            Self::Diagonal(d) => f.debug_tuple("Diagonal").field(d).finish(),
            Self::Field(_) => write!(f, "Field(..)"),
        }
    }
}

impl<T: Scalar> RiemannianMetric<T> {
    /// `G(z)` as a dense matrix.
    pub fn at(&self, z: &[T]) -> Tensor<T> {
        let d = z.len();
        match self {
            Self::Identity => Tensor::eye(d),
            Self::Diagonal(diag) => {
                let mut g = Tensor::zeros(&[diag.len(), diag.len()]);
                let n = diag.len();
                for (i, &v) in diag.iter().enumerate() {
                    g.data_mut()[i * n + i] = v;
                }
                g
            }
            Self::Field(f) => f(z),
        }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = a`, or a numeric error when `a` is not
/// positive definite.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = a.dims2()?;
    if n != m || a.rank() != 2 {
        return Err(shape_err!("cholesky of non-square {:?}", a.shape()));
    }
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut diag = a.at(&[j, j]);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > T::zero()) {
            return Err(Error::Numeric(format!("matrix is not positive definite (pivot {j})")));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.at(&[i, j]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Tensor::new(&[n, n], l)
}

/// `uᵀ G(z) v` after checking that `G(z)` is symmetric positive definite.
pub fn riemannian_inner<T: Scalar>(u: &[T], v: &[T], metric: &RiemannianMetric<T>, z: &[T]) -> Result<T> {
    let d = u.len();
    if v.len() != d || z.len() != d {
        return Err(shape_err!("inner product of lengths {}, {} at point of length {}", d, v.len(), z.len()));
    }
    if let RiemannianMetric::Identity = metric {
        return Ok(u.iter().zip(v).map(|(&a, &b)| a * b).sum());
    }
    let g = metric.at(z);
    if g.shape() != [d, d] {
        return Err(shape_err!("metric {:?} for dimension {d}", g.shape()));
    }
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (g.at(&[i, j]), g.at(&[j, i]));
            if (a - b).abs() > T::lit(1e-12) * a.abs().max(b.abs()).max(T::one()) {
                return Err(Error::Numeric("metric is not symmetric".into()));
            }
        }
    }
    cholesky(&g)?;
    let mut acc = T::zero();
    for i in 0..d {
        let row: T = (0..d).map(|j| g.at(&[i, j]) * v[j]).sum();
        acc += u[i] * row;
    }
    Ok(acc)
}

/// Planar layer `f(z) = z + u·tanh(wᵀz + b)`.
#[derive(Clone, Debug)]
pub struct FlowLayer {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    pub d_z: usize,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl FlowStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, layers: usize, d_z: usize) -> Self {
        let layers = (0..layers)
            .map(|k| FlowLayer {
                u: store.add_normal(format!("{name}.flow{k}.u"), &[d_z], rng),
                w: store.add_normal(format!("{name}.flow{k}.w"), &[d_z], rng),
                b: store.add_zeros(format!("{name}.flow{k}.b"), &[1]),
            })
            .collect();
        let stack = Self { layers, d_z };
        stack.enforce_invertibility(store);
        stack
    }

    /// Moves `u` along `w` wherever `wᵀu < −1 + margin`, using the usual
    /// `û = u + (m(wᵀu) − wᵀu)·w/‖w‖²` with `m(x) = −1 + softplus(x)`.
    pub fn enforce_invertibility<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let floor = -1.0 + INVERTIBILITY_MARGIN;
        for l in &self.layers {
            let w = store.get(l.w).clone();
            let u = store.get(l.u).clone();
            let wu = dot(w.data(), u.data()).to_f64_lossy();
            let ww = dot(w.data(), w.data()).to_f64_lossy();
            if wu >= floor || ww == 0.0 {
                continue;
            }
            let target = (-1.0 + softplus(wu)).max(floor + INVERTIBILITY_MARGIN);
            let c = T::lit((target - wu) / ww);
            let fixed: Vec<T> = u.data().iter().zip(w.data()).map(|(&ui, &wi)| ui + c * wi).collect();
            let fixed = Tensor::new(u.shape(), fixed).expect("same shape");
            store.set(l.u, fixed).expect("same shape");
        }
    }

    /// Applies the layers in order to the rows of `z: [m, d_z]`, returning
    /// the transported rows and the per-row log|det| sum `[m, 1]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, z: Var) -> Result<(Var, Var)> {
        let t = &g.tape;
        let shape = t.shape(z);
        if shape.len() != 2 || shape[1] != self.d_z {
            return Err(shape_err!("flow expects [m, {}], got {:?}", self.d_z, shape));
        }
        let m = shape[0];
        let mut z = z;
        let mut log_det: Option<Var> = None;
        for l in &self.layers {
            let u_row = t.reshape(g.p(l.u), &[1, self.d_z])?;
            let w_col = t.reshape(g.p(l.w), &[self.d_z, 1])?;
            let a = t.add_bias(t.matmul(z, w_col)?, g.p(l.b))?;
            let h = t.tanh(a);
            let z_next = t.add(z, t.matmul(h, u_row)?)?;
            let wu = t.sum_all(t.mul(g.p(l.u), g.p(l.w))?);
            let slope = t.add_const(t.neg(t.mul(h, h)?), T::one());
            let det = t.add_const(t.mul_scalar(slope, wu)?, T::one());
            if t.value(det).data().iter().any(|v| v.abs() < T::lit(MIN_ABS_DET)) {
                return Err(Error::Numeric("flow Jacobian is singular".into()));
            }
            let ld = t.log(t.abs(det))?;
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => t.add(acc, ld)?,
            });
            z = z_next;
        }
        let log_det = match log_det {
            Some(v) => v,
            None => t.constant(Tensor::zeros(&[m, 1])),
        };
        Ok((z, log_det))
    }

    /// Direct evaluation on one point, outside any tape.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, z: &[T]) -> Result<(Vec<T>, T)> {
        let mut z = z.to_vec();
        let mut log_det = T::zero();
        for l in &self.layers {
            let (u, w) = (store.get(l.u).data(), store.get(l.w).data());
            let h = (dot(w, &z) + store.get(l.b).data()[0]).tanh();
            let det = T::one() + (T::one() - h * h) * dot(u, w);
            if det.abs() < T::lit(MIN_ABS_DET) {
                return Err(Error::Numeric("flow Jacobian is singular".into()));
            }
            log_det += det.abs().ln();
            z.iter_mut().zip(u).for_each(|(zi, &ui)| *zi += ui * h);
        }
        Ok((z, log_det))
    }

    /// Inverts the stack by bisection on each layer's scalar `wᵀz`.
    pub fn inverse<T: Scalar>(&self, store: &ParamStore<T>, y: &[T]) -> Result<Vec<T>> {
        let mut y: Vec<f64> = y.iter().map(|v| v.to_f64_lossy()).collect();
        for l in self.layers.iter().rev() {
            let u = store.get(l.u).to_f64_vec();
            let w = store.get(l.w).to_f64_vec();
            let b = store.get(l.b).data()[0].to_f64_lossy();
            let wu = dot(&w, &u);
            if wu < -1.0 {
                return Err(Error::Numeric("flow layer is not invertible".into()));
            }
            // wᵀy = α + wᵀu·tanh(α + b) is increasing in α.
            let target = dot(&w, &y);
            let (mut lo, mut hi) = (target - wu.abs() - 1.0, target + wu.abs() + 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid + wu * (mid + b).tanh() < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let alpha = 0.5 * (lo + hi);
            let h = (alpha + b).tanh();
            y.iter_mut().zip(&u).for_each(|(yi, &ui)| *yi -= ui * h);
        }
        Ok(y.into_iter().map(T::lit).collect())
    }
}

/// Gaussian-kernel MMD, biased V-statistic, between the rows of `q` and `p`.
pub fn mmd<T: Scalar>(tape: &Tape<T>, q: Var, p: Var) -> Result<Var> {
    let (qs, ps) = (tape.shape(q), tape.shape(p));
    if qs.len() != 2 || qs != ps {
        return Err(shape_err!("mmd needs equal sample sets, got {:?} and {:?}", qs, ps));
    }
    if qs[0] < 2 {
        return Err(Error::InvalidArgument(format!("mmd needs at least 2 samples, got {}", qs[0])));
    }
    let kernel = |a: Var, b: Var| -> Result<Var> { Ok(tape.mean_all(tape.exp(tape.neg(tape.sq_dist(a, b)?)))) };
    let kqq = kernel(q, q)?;
    let kpp = kernel(p, p)?;
    let kqp = kernel(q, p)?;
    tape.sub(tape.add(kqq, kpp)?, tape.scale(kqp, T::lit(2.0)))
}

/// Sum over all entries of `0.5·(exp(lv) + m² − 1 − lv)`.
pub fn kld_gaussian<T: Scalar>(tape: &Tape<T>, mean: Var, logvar: Var) -> Result<Var> {
    let terms = tape.sub(tape.add(tape.exp(logvar), tape.mul(mean, mean)?)?, logvar)?;
    let terms = tape.add_const(terms, -T::one());
    Ok(tape.scale(tape.sum_all(terms), T::lit(0.5)))
}

/// Posterior and transported latent for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    /// Last-layer encoder states `[T, d]`.
    pub states: Var,
    /// Masked mean of the encoder input `[1, d]`.
    pub pooled_input: Var,
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
    pub z_prime: Var,
    pub log_det: Var,
}

/// Loss terms of the latent objective. `total` is composed from the other
/// four as `rec + λ·mmd + α·(kld − logdet)`.
#[derive(Clone, Copy, Debug)]
pub struct WretLoss {
    pub total: Var,
    pub rec: Var,
    pub mmd: Var,
    pub kld: Var,
    pub logdet: Var,
}

#[derive(Clone, Debug)]
pub struct WretEncoder {
    pub block: EncoderBlock<Linear>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub flows: FlowStack,
    pub gen_in: Linear,
    pub gen_out: Linear,
    pub cond: Linear,
    pub d: usize,
    pub d_z: usize,
}

impl WretEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        d_z: usize,
        flow_layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            block: EncoderBlock::new(store, rng, "wret.block0", d, heads, ffn_mult, 1)?,
            mean_head: Linear::new(store, rng, "wret.mean", d, d_z, true),
            logvar_head: Linear::new(store, rng, "wret.logvar", d, d_z, true),
            flows: FlowStack::new(store, rng, "wret", flow_layers, d_z),
            gen_in: Linear::new(store, rng, "wret.gen.in", d_z, d, true),
            gen_out: Linear::new(store, rng, "wret.gen.out", d, d, true),
            cond: Linear::new(store, rng, "wret.cond", d, d, true),
            d,
            d_z,
        })
    }

    /// Encodes `x_seq: [T, d]` and samples `z = mean + exp(logvar/2)·ε`.
    /// With `noise == None` the posterior mean is used (`ε = 0`).
    pub fn encode_posterior<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x_seq: Var,
        mask: Option<&[bool]>,
        noise: Option<&mut SeededRng>,
    ) -> Result<LatentState> {
        let t = &g.tape;
        let shape = t.shape(x_seq);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let len = shape[0];
        let weights = pool_weights::<T>(len, mask)?;
        let states = self.block.forward(g, x_seq, mask)?;
        let pooled_states = t.weighted_row_sum(states, weights.clone())?;
        let pooled_input = t.weighted_row_sum(x_seq, weights)?;
        let mean = self.mean_head.forward(g, pooled_states)?;
        let logvar = t.clamp(self.logvar_head.forward(g, pooled_states)?, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        let z = match noise {
            Some(rng) => {
                let eps = t.constant(rng.normal_tensor(&[1, self.d_z], 1.0));
                let std = t.exp(t.scale(logvar, T::lit(0.5)));
                t.add(mean, t.mul(std, eps)?)?
            }
            None => mean,
        };
        let (z_prime, log_det) = self.flows.forward(g, z)?;
        Ok(LatentState { states, pooled_input, mean, logvar, z, z_prime, log_det })
    }

    /// `G(z′)`: two-layer feed-forward map `[m, d_z] → [m, d]`.
    pub fn generate<T: Scalar>(&self, g: &Graph<'_, T>, z_prime: Var) -> Result<Var> {
        let h = g.tape.tanh(self.gen_in.forward(g, z_prime)?);
        self.gen_out.forward(g, h)
    }

    /// Per-position representation `cond(states + G(z′))` handed to fusion.
    pub fn encode_states<T: Scalar>(&self, g: &Graph<'_, T>, states: Var, generated: Var) -> Result<Var> {
        let t = &g.tape;
        let gen = t.reshape(generated, &[self.d])?;
        self.cond.forward(g, t.add_bias(states, gen)?)
    }

    /// Latent objective over a batch of states. MMD needs at least two
    /// samples; for a single sample it contributes zero.
    pub fn objective<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        states: &[LatentState],
        prior: &Tensor<T>,
        lambda: T,
        alpha: T,
    ) -> Result<WretLoss> {
        let t = &g.tape;
        if states.is_empty() {
            return Err(Error::InvalidArgument("latent objective of an empty batch".into()));
        }
        let m = states.len();
        if prior.shape() != [m, self.d_z] {
            return Err(shape_err!("prior draws {:?} for {m} samples of width {}", prior.shape(), self.d_z));
        }
        let cat = |f: &dyn Fn(&LatentState) -> Var| -> Result<Var> {
            let parts: Vec<Var> = states.iter().map(f).collect();
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                t.concat_rows(&parts)
            }
        };
        let zp = cat(&|s| s.z_prime)?;
        let x = cat(&|s| s.pooled_input)?;
        let diff = t.sub(x, self.generate(g, zp)?)?;
        let rec = t.mean_all(t.mul(diff, diff)?);
        let mmd_v = if m >= 2 {
            mmd(t, zp, t.constant(prior.clone()))?
        } else {
            t.constant(Tensor::scalar(T::zero()))
        };
        let inv_m = T::one() / T::from_usize_lossy(m);
        let kld = t.scale(t.sum_all(kld_gaussian(t, cat(&|s| s.mean)?, cat(&|s| s.logvar)?)?), inv_m);
        let logdet = t.scale(t.sum_all(cat(&|s| s.log_det)?), inv_m);
        let total = compose_total(t, rec, mmd_v, kld, logdet, lambda, alpha)?;
        Ok(WretLoss { total, rec, mmd: mmd_v, kld, logdet })
    }
}

/// `rec + λ·mmd + α·(kld − logdet)` in a fixed evaluation order.
pub fn compose_total<T: Scalar>(tape: &Tape<T>, rec: Var, mmd: Var, kld: Var, logdet: Var, lambda: T, alpha: T) -> Result<Var> {
    let rec = tape.reshape(rec, &[1])?;
    let mmd = tape.reshape(mmd, &[1])?;
    let kld = tape.reshape(kld, &[1])?;
    let logdet = tape.reshape(logdet, &[1])?;
    let reg = tape.scale(tape.sub(kld, logdet)?, alpha);
    tape.add(tape.add(rec, tape.scale(mmd, lambda))?, reg)
}

/// Scalar mirror of [`compose_total`].
pub fn compose_total_value(rec: f64, mmd: f64, kld: f64, logdet: f64, lambda: f64, alpha: f64) -> f64 {
    (rec + mmd * lambda) + (kld - logdet) * alpha
}

fn pool_weights<T: Scalar>(len: usize, mask: Option<&[bool]>) -> Result<Vec<T>> {
    let keep: Vec<bool> = match mask {
        Some(m) if m.len() != len => return Err(shape_err!("mask of length {} for {len} positions", m.len())),
        Some(m) => m.to_vec(),
        None => vec![true; len],
    };
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::InvalidArgument("every position is masked".into()));
    }
    let w = T::one() / T::from_usize_lossy(count);
    Ok(keep.iter().map(|&k| if k { w } else { T::zero() }).collect())
}
