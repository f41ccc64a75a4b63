//! Loss functions and their backward passes: per-pixel softmax cross-entropy
//! for supervised segmentation, mean absolute error for output matching.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel softmax over the channel axis of an N×K×H×W tensor,
/// numerically stabilized by max subtraction.
pub fn softmax_channels<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![S::ZERO; x.len()];
    for b in 0..n {
        for p in 0..plane {
            let mut m = x[(b * k) * plane + p];
            for c in 1..k {
                m = m.maximum(x[(b * k + c) * plane + p]);
            }
            let mut z = S::ZERO;
            for c in 0..k {
                let e = (x[(b * k + c) * plane + p] - m).exp();
                out[(b * k + c) * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                out[(b * k + c) * plane + p] /= z;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Pull a probability-space gradient back through [`softmax_channels`]:
/// `d_logit_k = p_k · (g_k − Σ_m g_m p_m)` per pixel.
pub fn softmax_backward<S: Scalar>(probs: &Tensor<S>, d_probs: &Tensor<S>) -> Result<Tensor<S>> {
    if !probs.same_shape(d_probs) {
        return Err(Error::shape("softmax backward shape mismatch".to_string()));
    }
    let (n, k, h, w) = probs.dims4()?;
    let plane = h * w;
    let p = probs.data();
    let g = d_probs.data();
    let mut dx = vec![S::ZERO; p.len()];
    for b in 0..n {
        for px in 0..plane {
            let mut dot = S::ZERO;
            for c in 0..k {
                let i = (b * k + c) * plane + px;
                dot += g[i] * p[i];
            }
            for c in 0..k {
                let i = (b * k + c) * plane + px;
                dx[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Tensor::from_vec(probs.shape(), dx)
}

/// Cache from [`softmax_cross_entropy`] used by its backward pass.
pub struct CeCache<S> {
    probs: Tensor<S>,
    labels: Vec<u8>,
}

/// Mean per-pixel cross-entropy between N×K×H×W logits and N·H·W class
/// labels. Labels must be < K.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
) -> Result<(S, CeCache<S>)> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::shape(format!(
            "labels length {} does not match N·H·W = {}",
            labels.len(),
            n * plane
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| (l as usize) >= k) {
        return Err(Error::invalid(format!("label index {bad} >= class count {k}")));
    }
    let probs = softmax_channels(logits)?;
    let p = probs.data();
    let mut total = 0.0f64;
    for b in 0..n {
        for px in 0..plane {
            let label = labels[b * plane + px] as usize;
            let prob = p[(b * k + label) * plane + px].to_f64();
            total -= prob.max(1e-30).ln();
        }
    }
    let loss = S::from_f64(total / (n * plane) as f64);
    if !loss.finite() {
        return Err(Error::non_finite("softmax cross-entropy loss".to_string()));
    }
    Ok((loss, CeCache { probs, labels: labels.to_vec() }))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(softmax − onehot) / (N·H·W)`.
pub fn softmax_cross_entropy_backward<S: Scalar>(cache: &CeCache<S>) -> Result<Tensor<S>> {
    let (n, k, h, w) = cache.probs.dims4()?;
    let plane = h * w;
    let inv = S::from_f64(1.0 / (n * plane) as f64);
    let mut dx = cache.probs.clone();
    let d = dx.data_mut();
    for b in 0..n {
        for px in 0..plane {
            let label = cache.labels[b * plane + px] as usize;
            d[(b * k + label) * plane + px] -= S::ONE;
        }
    }
    for v in d.iter_mut() {
        *v *= inv;
    }
    Ok(dx)
}

/// Mean absolute elementwise difference.
pub fn l1_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "l1 loss shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut total = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        total += (x.to_f64() - y.to_f64()).abs();
    }
    Ok(S::from_f64(total / a.len() as f64))
}

/// Gradient of [`l1_loss`] with respect to `a`: `sign(a − b) / count`,
/// with the subgradient 0 at ties.
pub fn l1_loss_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if !a.same_shape(b) {
        return Err(Error::shape("l1 backward shape mismatch".to_string()));
    }
    let inv = S::from_f64(1.0 / a.len() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x - *y).sign() * inv)
        .collect();
    Tensor::from_vec(a.shape(), data)
}
