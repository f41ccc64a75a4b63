//! SGD with classical momentum and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine-annealed learning rate: `lr0 · 0.5 · (1 + cos(π·t/I))`.
pub fn cosine_lr(t: usize, total_iters: usize, lr0: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::invalid("cosine_lr: total iteration count must be > 0"));
    }
    if t > total_iters {
        return Err(Error::invalid(format!(
            "cosine_lr: iteration {t} exceeds total {total_iters}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total_iters as f64).cos()))
}

/// One momentum-SGD update on a single parameter block:
/// `v ← momentum·v + g`, `p ← p − lr·v`.
///
/// A non-finite gradient aborts with a diagnostic naming the offending
/// element; parameters are left untouched in that case.
pub fn sgd_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    velocity: &mut [S],
    lr: S,
    momentum: S,
    context: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_update({context}): params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if lr.to_f64() <= 0.0 {
        return Err(Error::invalid(format!("sgd_update({context}): lr must be > 0")));
    }
    let m = momentum.to_f64();
    if !(0.0..1.0).contains(&m) {
        return Err(Error::invalid(format!(
            "sgd_update({context}): momentum {m} outside [0, 1)"
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.finite() {
            return Err(Error::non_finite(format!(
                "sgd_update({context}): gradient element {i} is {g}"
            )));
        }
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}
