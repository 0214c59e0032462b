//! Objective assembly, learning-rate schedule, optimizer and epoch loop.

mod adam;
mod config;
mod trainer;

pub use adam::Adam;
pub use config::{RunConfig, TrainConfig};
pub use trainer::{StepMetrics, TrainState, Trainer, METRICS_HEADER};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tokens::PAD;

/// Mean over non-PAD positions of `−log softmax(logits)[target]`.
/// `logits` is `[L, V]` with row `i` predicting `targets[i]`.
pub fn nll_loss<T: Scalar>(tape: &Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(shape_err!("logits {:?} for {} targets", shape, targets.len()));
    }
    let vocab = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::InvalidArgument(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| i * vocab + t)
        .collect();
    if flat.is_empty() {
        return Err(Error::InvalidArgument("target has no non-pad positions".into()));
    }
    let lp = tape.log_softmax(logits)?;
    Ok(tape.neg(tape.mean_all(tape.pick(lp, &flat)?)))
}

/// `mle_weight · nll + latent objective`.
pub fn total_loss<T: Scalar>(tape: &Tape<T>, nll: Var, latent: Option<Var>, mle_weight: T) -> Result<Var> {
    let weighted = tape.scale(nll, mle_weight);
    match latent {
        Some(l) => tape.add(weighted, l),
        None => Ok(weighted),
    }
}

/// Scalar mirror of [`total_loss`] with identical operation order.
pub fn total_loss_value(nll: f64, latent: Option<f64>, mle_weight: f64) -> f64 {
    let weighted = nll * mle_weight;
    match latent {
        Some(l) => weighted + l,
        None => weighted,
    }
}

/// Linear warmup to `max_lr` over `warmup` steps, then `max_lr·√(warmup/step)`.
pub fn lr_at(step: u64, max_lr: f64, warmup: u64) -> f64 {
    let warmup = warmup.max(1);
    if step <= warmup {
        max_lr * (step as f64 / warmup as f64)
    } else {
        max_lr * (warmup as f64 / step as f64).sqrt()
    }
}
