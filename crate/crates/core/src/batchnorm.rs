//! Batch normalization over N×C×H×W with per-channel learnable scale/shift
//! and exponentially averaged running statistics.
//!
//! Train mode normalizes by the biased (population) batch statistics over
//! N×H×W and folds them into the running estimates as
//! `running ← (1 − momentum)·running + momentum·batch`. Eval mode normalizes
//! by the running statistics only. The running variance stores the biased
//! batch variance so that it is exactly the quantity the eval normalizer
//! divides by.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState<S = f32> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
    pub mode: Mode,
}

/// Activations cached by the forward pass for the matching backward.
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

impl<S: Scalar> BnLayerState<S> {
    pub fn new(channels: usize, momentum: S, eps: S) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("batchnorm needs at least one channel"));
        }
        let m = momentum.to_f64();
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::invalid(format!("batchnorm momentum {m} outside (0, 1]")));
        }
        if eps.to_f64() <= 0.0 {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        Ok(BnLayerState {
            gamma: vec![S::ONE; channels],
            beta: vec![S::ZERO; channels],
            running_mean: vec![S::ZERO; channels],
            running_var: vec![S::ONE; channels],
            momentum,
            eps,
            mode: Mode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("batchnorm forward on zero batch"));
        }
        Ok((n, c, h, w))
    }

    /// Forward pass; in train mode this updates the running statistics.
    pub fn forward(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let (out, _) = self.forward_cached(input)?;
        Ok(out)
    }

    pub fn forward_cached(&mut self, input: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        match self.mode {
            Mode::Train => self.forward_train(input),
            Mode::Eval => self.forward_eval_cached(input),
        }
    }

    /// Eval-mode forward without any mutation; usable regardless of `mode`.
    pub fn forward_eval(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.eval_pass(input)?.0)
    }

    fn eval_pass(&self, input: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        let (n, c, h, w) = self.check_input(input)?;
        let plane = h * w;
        let x = input.data();
        let mut xhat = vec![S::ZERO; x.len()];
        let mut out = vec![S::ZERO; x.len()];
        let mut inv_std = vec![S::ZERO; c];
        for ch in 0..c {
            inv_std[ch] = S::ONE / (self.running_var[ch] + self.eps).sqrt();
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, istd) = (self.running_mean[ch], inv_std[ch]);
                let (g, be) = (self.gamma[ch], self.beta[ch]);
                for i in base..base + plane {
                    let norm = (x[i] - mu) * istd;
                    xhat[i] = norm;
                    out[i] = g * norm + be;
                }
            }
        }
        let out = Tensor::from_vec(input.shape(), out)?;
        out.ensure_finite("batchnorm eval output")?;
        let cache = BnCache {
            xhat: Tensor::from_vec(input.shape(), xhat)?,
            inv_std,
            mode: Mode::Eval,
        };
        Ok((out, cache))
    }

    fn forward_eval_cached(&self, input: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        self.eval_pass(input)
    }

    fn forward_train(&mut self, input: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        let (n, c, h, w) = self.check_input(input)?;
        let plane = h * w;
        let count = n * plane;
        let count_s = S::from_f64(count as f64);
        let x = input.data();
        let mut xhat = vec![S::ZERO; x.len()];
        let mut out = vec![S::ZERO; x.len()];
        let mut inv_std = vec![S::ZERO; c];

        for ch in 0..c {
            let mut sum = S::ZERO;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    sum += x[i];
                }
            }
            let mean = sum / count_s;
            let mut sq = S::ZERO;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let d = x[i] - mean;
                    sq += d * d;
                }
            }
            let var = sq / count_s;
            let istd = S::ONE / (var + self.eps).sqrt();
            inv_std[ch] = istd;

            let (g, be) = (self.gamma[ch], self.beta[ch]);
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let norm = (x[i] - mean) * istd;
                    xhat[i] = norm;
                    out[i] = g * norm + be;
                }
            }

            let keep = S::ONE - self.momentum;
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * var;
        }

        let out = Tensor::from_vec(input.shape(), out)?;
        out.ensure_finite("batchnorm train output")?;
        let cache = BnCache {
            xhat: Tensor::from_vec(input.shape(), xhat)?,
            inv_std,
            mode: Mode::Train,
        };
        Ok((out, cache))
    }

    /// Gradients through the forward pass recorded in `cache`:
    /// returns (d_input, d_gamma, d_beta).
    pub fn backward(&self, cache: &BnCache<S>, d_out: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
        if !cache.xhat.same_shape(d_out) {
            return Err(Error::shape("batchnorm backward shape mismatch".to_string()));
        }
        let (n, c, h, w) = cache.xhat.dims4()?;
        let plane = h * w;
        let count = n * plane;
        let count_s = S::from_f64(count as f64);
        let xhat = cache.xhat.data();
        let dy = d_out.data();
        let mut dx = vec![S::ZERO; dy.len()];
        let mut dgamma = vec![S::ZERO; c];
        let mut dbeta = vec![S::ZERO; c];

        for ch in 0..c {
            let mut s1 = S::ZERO; // Σ dy
            let mut s2 = S::ZERO; // Σ dy·x̂
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    s1 += dy[i];
                    s2 += dy[i] * xhat[i];
                }
            }
            dbeta[ch] = s1;
            dgamma[ch] = s2;

            let scale = self.gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mean_dy = s1 / count_s;
                    let mean_dyx = s2 / count_s;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dyx);
                        }
                    }
                }
                Mode::Eval => {
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = scale * dy[i];
                        }
                    }
                }
            }
        }

        Ok((Tensor::from_vec(cache.xhat.shape(), dx)?, dgamma, dbeta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.uniform(-2.0, 3.0) as f32)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let mut bn = BnLayerState::<f32>::new(3, 0.1, 1e-5).unwrap();
        let x = random_input(&[4, 3, 5, 5], 1);
        let y = bn.forward(&x).unwrap();
        let (n, c, h, w) = y.dims4().unwrap();
        let plane = h * w;
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let v = y.data()[i] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let m = sum / (n * plane) as f64;
            let var = sq / (n * plane) as f64 - m * m;
            assert!(m.abs() < 1e-5, "channel {ch} mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn eval_mode_with_identity_stats_scales_by_inv_sqrt_one_plus_eps() {
        let mut bn = BnLayerState::<f32>::new(2, 0.1, 1e-5).unwrap();
        bn.mode = Mode::Eval;
        let x = random_input(&[1, 2, 4, 4], 2);
        let y = bn.forward(&x).unwrap();
        let k = 1.0 / (1.0f32 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_follow_scalar_recurrence() {
        let momentum = 0.25f64;
        let mut bn = BnLayerState::<f32>::new(1, momentum as f32, 1e-5).unwrap();
        // Independent scalar recurrence on the same batches.
        let mut rm = 0.0f64;
        let mut rv = 1.0f64;
        for k in 0..5 {
            let x = random_input(&[2, 1, 3, 3], 100 + k);
            let vals: Vec<f64> = x.data().iter().map(|v| *v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            rm = (1.0 - momentum) * rm + momentum * mean;
            rv = (1.0 - momentum) * rv + momentum * var;
            bn.forward(&x).unwrap();
        }
        assert!((bn.running_mean[0] as f64 - rm).abs() < 1e-5, "{} vs {rm}", bn.running_mean[0]);
        assert!((bn.running_var[0] as f64 - rv).abs() < 1e-5, "{} vs {rv}", bn.running_var[0]);
    }

    #[test]
    fn eval_mode_never_mutates_running_stats() {
        let mut bn = BnLayerState::<f32>::new(2, 0.1, 1e-5).unwrap();
        bn.forward(&random_input(&[2, 2, 3, 3], 5)).unwrap();
        bn.mode = Mode::Eval;
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        bn.forward(&random_input(&[2, 2, 3, 3], 6)).unwrap();
        assert_eq!(before.0, bn.running_mean);
        assert_eq!(before.1, bn.running_var);
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_hyperparams() {
        let mut bn = BnLayerState::<f32>::new(3, 0.1, 1e-5).unwrap();
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
        assert!(BnLayerState::<f32>::new(3, 0.0, 1e-5).is_err());
        assert!(BnLayerState::<f32>::new(3, 1.5, 1e-5).is_err());
        assert!(BnLayerState::<f32>::new(0, 0.1, 1e-5).is_err());
    }
}
