//! Central-difference gradient oracle.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    /// Coordinates skipped because the step straddles a kink (e.g. ReLU at 0).
    pub kinks_exempted: usize,
}

fn check_step(eps: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step {eps} outside [1e-7, 1e-3]")))
    }
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].to_f64_lossy())
}

/// Compares `analytic` against central differences of `eval` around `inputs`.
fn compare<T, E>(inputs: &[Tensor<T>], analytic: &[Vec<f64>], eval: E, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    E: Fn(&[Tensor<T>]) -> Result<f64>,
{
    let center = eval(inputs)?;
    let again = eval(inputs)?;
    if center.to_bits() != again.to_bits() {
        return Err(Error::InvalidArgument(format!(
            "function is not deterministic: {center} vs {again}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        kinks_exempted: 0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for k in 0..inputs.len() {
        for c in 0..inputs[k].len() {
            let x0 = inputs[k].data()[c];
            let h = T::lit(eps);
            probe[k].data_mut()[c] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[c] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[c] = x0;
            report.coordinates += 1;

            let numeric = (fp - fm) / (2.0 * eps);
            let second = (fp - 2.0 * center + fm).abs();
            if second > 1e-2 * eps * numeric.abs().max(1.0) {
                report.kinks_exempted += 1;
                continue;
            }
            let rel = (analytic[k][c] - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((k, c));
            }
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar function of several tensors.
///
/// A coordinate whose second difference is of order `eps` (rather than
/// `eps²`) sits on a kink of a piecewise-linear op and is exempted.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    check_step(eps)?;
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(&tape, out)
    };
    eval(inputs)?;

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();
    compare(inputs, &analytic, eval, eps)
}

/// Checks gradients of a model loss with respect to the parameters `ids`
/// of `store`. `f` builds the loss on the graph it is given.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], f: F, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Graph<'_, T>) -> Result<Var>,
{
    check_step(eps)?;
    let g = Graph::new(store);
    let loss = f(&g)?;
    scalar_of(&g.tape, loss)?;
    g.tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let var = g.p(id);
            g.tape
                .grad(var)
                .map(|t| t.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()])
        })
        .collect();
    let inputs: Vec<Tensor<T>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut probe = store.clone();
        for (&id, x) in ids.iter().zip(xs) {
            probe.set(id, x.clone())?;
        }
        let g = Graph::inference(&probe);
        let out = f(&g)?;
        scalar_of(&g.tape, out)
    };
    compare(&inputs, &analytic, eval, eps)
}

/// Single-input form returning the maximum relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_err)
}
