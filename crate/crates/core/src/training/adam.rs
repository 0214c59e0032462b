use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the accumulated gradients; parameters
    /// without a gradient buffer see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(shape_err!("optimizer holds {} moments for {} parameters", self.m.len(), store.len()));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let (lr, eps) = (T::lit(lr), T::lit(EPS));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let grad: Option<Vec<T>> = store.get(id).grad().map(<[T]>::to_vec);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
