//! Self-check routines: finite-difference verification of every backward
//! pass and independent scalar oracles for the scoring and weighting
//! formulas. The oracles recompute each quantity with plain loops, never
//! through the implementation they check; the test suites and the
//! acceptance gate both call these entry points.

use crate::batchnorm::{BnLayerState, Mode};
use crate::distill::alpha;
use crate::error::{Error, Result};
use crate::eval::miou;
use crate::loss::{
    l1_loss, l1_loss_backward, softmax_cross_entropy, softmax_cross_entropy_backward,
};
use crate::nets::{FeatureStats, LayerFeatureStats};
use crate::ops::{
    conv2d, conv2d_backward, relu, relu_backward, upsample_bilinear, upsample_bilinear_backward,
};
use crate::rng::Rng;
use crate::sampler::{compute_weights, distribution_distance, BnLayerReference, BnReference, DistanceConfig};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-6;

/// Outcome of one check: the largest deviation observed over all probes.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_deviation: f64,
    pub cases: usize,
}

fn random_vec(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(lo, hi)).collect()
}

/// Relative error between an analytic gradient element and its central
/// finite difference, with an absolute floor for near-zero pairs.
fn probe(
    x0: &[f64],
    analytic: &[f64],
    rng: &mut Rng,
    probes: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if x0.len() != analytic.len() {
        return Err(Error::shape("gradient length mismatch in probe".to_string()));
    }
    let mut worst = 0.0f64;
    for _ in 0..probes.min(x0.len()) {
        let idx = rng.below(x0.len() as u64) as usize;
        let mut xp = x0.to_vec();
        xp[idx] = x0[idx] + GRAD_STEP;
        let fp = f(&xp);
        xp[idx] = x0[idx] - GRAD_STEP;
        let fm = f(&xp);
        let numeric = (fp - fm) / (2.0 * GRAD_STEP);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn gradcheck_conv2d(seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0x61c0 + seed);
        let (n, cin, cout, h, w, kh, kw) = (2, 2, 3, 5, 4, 3, 3);
        let stride = if seed % 2 == 0 { 1 } else { 2 };
        let pad = (seed % 2) as usize;
        let x0 = random_vec(&mut rng, n * cin * h * w, -1.0, 1.0);
        let k0 = random_vec(&mut rng, cout * cin * kh * kw, -1.0, 1.0);
        let b0 = random_vec(&mut rng, cout, -0.5, 0.5);
        let x = Tensor::from_vec(&[n, cin, h, w], x0.clone())?;
        let k = Tensor::from_vec(&[cout, cin, kh, kw], k0.clone())?;
        let y = conv2d(&x, &k, Some(&b0), stride, pad)?;
        let obj = random_vec(&mut rng, y.len(), -1.0, 1.0);
        let d_out = Tensor::from_vec(y.shape(), obj.clone())?;
        let (dx, dk, db) = conv2d_backward(&x, &k, stride, pad, &d_out)?;

        let objective = |xs: &Tensor<f64>, ks: &Tensor<f64>, bs: &[f64]| -> f64 {
            let y = conv2d(xs, ks, Some(bs), stride, pad).expect("conv forward");
            y.data().iter().zip(&obj).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| {
            objective(&Tensor::from_vec(&[n, cin, h, w], xs.to_vec()).unwrap(), &k, &b0)
        })?);
        worst = worst.max(probe(&k0, dk.data(), &mut rng, 4, &mut |ks| {
            objective(&x, &Tensor::from_vec(&[cout, cin, kh, kw], ks.to_vec()).unwrap(), &b0)
        })?);
        worst = worst.max(probe(&b0, &db, &mut rng, 4, &mut |bs| objective(&x, &k, bs))?);
    }
    Ok(CheckResult { name: "conv2d", max_deviation: worst, cases: seeds as usize })
}

pub fn gradcheck_batchnorm(mode: Mode, seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0xb417 + seed);
        let (n, c, h, w) = (3, 2, 3, 4);
        let shape = [n, c, h, w];
        let x0 = random_vec(&mut rng, n * c * h * w, -2.0, 2.0);
        let g0 = random_vec(&mut rng, c, 0.5, 1.5);
        let b0 = random_vec(&mut rng, c, -0.5, 0.5);
        let obj = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);

        let make = |gamma: &[f64], beta: &[f64]| -> Result<BnLayerState<f64>> {
            let mut bn = BnLayerState::<f64>::new(c, 0.1, 1e-5)?;
            bn.gamma = gamma.to_vec();
            bn.beta = beta.to_vec();
            for ch in 0..c {
                bn.running_mean[ch] = 0.3 * (ch as f64 + 1.0);
                bn.running_var[ch] = 0.5 + 0.25 * ch as f64;
            }
            bn.mode = mode;
            Ok(bn)
        };
        let objective = |xs: &[f64], gamma_v: &[f64], beta: &[f64]| -> f64 {
            let mut bn = make(gamma_v, beta).expect("bn");
            let y = bn.forward(&Tensor::from_vec(&shape, xs.to_vec()).unwrap()).expect("bn fwd");
            y.data().iter().zip(&obj).map(|(a, b)| a * b).sum()
        };

        let mut bn = make(&g0, &b0)?;
        let x = Tensor::from_vec(&shape, x0.clone())?;
        let (y, cache) = bn.forward_cached(&x)?;
        let d_out = Tensor::from_vec(y.shape(), obj.clone())?;
        let (dx, dg, db) = bn.backward(&cache, &d_out)?;

        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| objective(xs, &g0, &b0))?);
        worst = worst.max(probe(&g0, &dg, &mut rng, 4, &mut |gs| objective(&x0, gs, &b0))?);
        worst = worst.max(probe(&b0, &db, &mut rng, 4, &mut |bs| objective(&x0, &g0, bs))?);
    }
    let name = match mode {
        Mode::Train => "batchnorm[train]",
        Mode::Eval => "batchnorm[eval]",
    };
    Ok(CheckResult { name, max_deviation: worst, cases: seeds as usize })
}

pub fn gradcheck_relu(seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0x4e14 + seed);
        let len = 24;
        // Stay away from the kink at zero.
        let x0: Vec<f64> = (0..len)
            .map(|_| {
                let v = rng.uniform(0.05, 1.5);
                if rng.next_f64() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let obj = random_vec(&mut rng, len, -1.0, 1.0);
        let x = Tensor::from_vec(&[len], x0.clone())?;
        let d_out = Tensor::from_vec(&[len], obj.clone())?;
        let dx = relu_backward(&x, &d_out)?;
        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| {
            let y = relu(&Tensor::from_vec(&[len], xs.to_vec()).unwrap());
            y.data().iter().zip(&obj).map(|(a, b)| a * b).sum()
        })?);
    }
    Ok(CheckResult { name: "relu", max_deviation: worst, cases: seeds as usize })
}

pub fn gradcheck_upsample(seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0x0b5a + seed);
        let (n, c, h, w, scale) = (1, 2, 3, 4, 2);
        let x0 = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let x = Tensor::from_vec(&[n, c, h, w], x0.clone())?;
        let y = upsample_bilinear(&x, scale)?;
        let obj = random_vec(&mut rng, y.len(), -1.0, 1.0);
        let d_out = Tensor::from_vec(y.shape(), obj.clone())?;
        let dx = upsample_bilinear_backward(&[n, c, h, w], scale, &d_out)?;
        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| {
            let x = Tensor::from_vec(&[n, c, h, w], xs.to_vec()).unwrap();
            let y = upsample_bilinear(&x, scale).unwrap();
            y.data().iter().zip(&obj).map(|(a, b)| a * b).sum()
        })?);
    }
    Ok(CheckResult { name: "bilinear_upsample", max_deviation: worst, cases: seeds as usize })
}

pub fn gradcheck_softmax_ce(seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0x5ce0 + seed);
        let (n, k, h, w) = (2, 4, 2, 3);
        let x0 = random_vec(&mut rng, n * k * h * w, -2.0, 2.0);
        let labels: Vec<u8> = (0..n * h * w).map(|_| rng.below(k as u64) as u8).collect();
        let x = Tensor::from_vec(&[n, k, h, w], x0.clone())?;
        let (_, cache) = softmax_cross_entropy(&x, &labels)?;
        let dx = softmax_cross_entropy_backward(&cache)?;
        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| {
            let x = Tensor::from_vec(&[n, k, h, w], xs.to_vec()).unwrap();
            softmax_cross_entropy(&x, &labels).unwrap().0
        })?);
    }
    Ok(CheckResult { name: "softmax_cross_entropy", max_deviation: worst, cases: seeds as usize })
}

pub fn gradcheck_l1(seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0x1105 + seed);
        let len = 30;
        let x0 = random_vec(&mut rng, len, -1.0, 1.0);
        // Separate the operands so probes never cross a kink.
        let other: Vec<f64> = x0.iter().map(|v| v + if *v > 0.0 { 0.5 } else { -0.5 }).collect();
        let a = Tensor::from_vec(&[len], x0.clone())?;
        let b = Tensor::from_vec(&[len], other)?;
        let dx = l1_loss_backward(&a, &b)?;
        worst = worst.max(probe(&x0, dx.data(), &mut rng, 4, &mut |xs| {
            l1_loss(&Tensor::from_vec(&[len], xs.to_vec()).unwrap(), &b).unwrap()
        })?);
    }
    Ok(CheckResult { name: "l1_loss", max_deviation: worst, cases: seeds as usize })
}

/// Every layer's gradient check; each entry must come in under
/// [`GRAD_REL_TOL`].
pub fn gradcheck_all(seeds: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        gradcheck_conv2d(seeds)?,
        gradcheck_batchnorm(Mode::Train, seeds)?,
        gradcheck_batchnorm(Mode::Eval, seeds)?,
        gradcheck_relu(seeds)?,
        gradcheck_upsample(seeds)?,
        gradcheck_softmax_ce(seeds)?,
        gradcheck_l1(seeds)?,
    ])
}

// ---------------------------------------------------------------------------
// Scalar formula oracles
// ---------------------------------------------------------------------------

pub fn oracle_distribution_distance(cases: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(0xd157);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let layer_count = 1 + rng.below(4) as usize;
        let mut ref_layers = Vec::new();
        let mut stat_layers = Vec::new();
        let mut expected_terms = Vec::new();
        for li in 0..layer_count {
            let c = 1 + rng.below(8) as usize;
            let rm: Vec<f32> = (0..c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let rv: Vec<f32> = (0..c).map(|_| rng.uniform(0.0, 2.0) as f32).collect();
            let sm: Vec<f32> = (0..c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let sv: Vec<f32> = (0..c).map(|_| rng.uniform(0.0, 2.0) as f32).collect();
            // Independent scalar recomputation.
            let mut msq = 0.0f64;
            let mut vsq = 0.0f64;
            for i in 0..c {
                msq += (sm[i] as f64 - rm[i] as f64) * (sm[i] as f64 - rm[i] as f64);
                vsq += (sv[i] as f64 - rv[i] as f64) * (sv[i] as f64 - rv[i] as f64);
            }
            expected_terms.push((msq.sqrt() + vsq.sqrt()) / (c as f64).sqrt());
            ref_layers.push(BnLayerReference { layer_index: li, mean: rm, var: rv });
            stat_layers.push(LayerFeatureStats { layer_index: li, mean: sm, var: sv });
        }
        let expected = expected_terms.iter().sum::<f64>() / expected_terms.len() as f64;
        let got = distribution_distance(
            &FeatureStats { layers: stat_layers },
            &BnReference { layers: ref_layers },
            &DistanceConfig::default(),
        )?;
        worst = worst.max((got.aggregate - expected).abs());
        for (g, e) in got.per_layer.iter().zip(&expected_terms) {
            worst = worst.max((g - e).abs());
        }
    }
    Ok(CheckResult { name: "distribution_distance", max_deviation: worst, cases })
}

pub fn oracle_compute_weights(cases: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(0xc0e1);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = 1 + rng.below(30) as usize;
        let ds: Vec<f64> = if case % 7 == 0 {
            vec![rng.uniform(0.0, 5.0); n] // degenerate: all equal
        } else {
            (0..n).map(|_| rng.uniform(0.0, 5.0)).collect()
        };
        let got = compute_weights(&ds)?;
        // Scalar oracle.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &d in &ds {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        for (i, &d) in ds.iter().enumerate() {
            let expected = if hi == lo { 1.0 } else { 1.0 - (d - lo) / (hi - lo) };
            worst = worst.max((got[i] - expected).abs());
        }
    }
    Ok(CheckResult { name: "compute_weights", max_deviation: worst, cases })
}

pub fn oracle_alpha(cases: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(0xa1fa);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let total = 2 * (1 + rng.below(500) as usize);
        let t = rng.below(total as u64 + 1) as usize;
        let omega = rng.next_f64();
        let got = alpha(t, omega, total)?;
        let half = total as f64 / 2.0;
        let expected =
            if (t as f64) > half { 1.0 } else { omega + (1.0 - omega) / half * t as f64 };
        worst = worst.max((got - expected).abs());
    }
    Ok(CheckResult { name: "alpha", max_deviation: worst, cases })
}

pub fn oracle_l1(cases: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(0x11a0);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = 1 + rng.below(200) as usize;
        let a: Vec<f32> = (0..len).map(|_| rng.uniform(-3.0, 3.0) as f32).collect();
        let b: Vec<f32> = (0..len).map(|_| rng.uniform(-3.0, 3.0) as f32).collect();
        let mut expected = 0.0f64;
        for i in 0..len {
            expected += (a[i] as f64 - b[i] as f64).abs();
        }
        expected /= len as f64;
        let got = l1_loss(
            &Tensor::from_vec(&[len], a.clone())?,
            &Tensor::from_vec(&[len], b.clone())?,
        )?;
        worst = worst.max((got as f64 - expected).abs());
    }
    Ok(CheckResult { name: "l1_loss", max_deviation: worst, cases })
}

pub fn oracle_miou(cases: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(0x310d);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = 2 + (case % 3);
        let n = 64;
        let pred: Vec<u8> = (0..n).map(|_| rng.below(k as u64) as u8).collect();
        let gt: Vec<u8> = (0..n).map(|_| rng.below(k as u64) as u8).collect();
        let got = miou(&pred, &gt, k)?;
        // Brute-force per-pixel counting oracle.
        let mut sum = 0.0f64;
        let mut present = 0usize;
        for c in 0..k as u8 {
            let tp = pred.iter().zip(&gt).filter(|(p, g)| **p == c && **g == c).count();
            let fp = pred.iter().zip(&gt).filter(|(p, g)| **p == c && **g != c).count();
            let fn_ = pred.iter().zip(&gt).filter(|(p, g)| **p != c && **g == c).count();
            if tp + fp + fn_ > 0 {
                let expected = tp as f64 / (tp + fp + fn_) as f64;
                sum += expected;
                present += 1;
                let got_c = got.per_class[c as usize]
                    .ok_or_else(|| Error::invalid("class unexpectedly absent"))?;
                worst = worst.max((got_c - expected).abs());
            } else if got.per_class[c as usize].is_some() {
                return Err(Error::invalid("class unexpectedly present"));
            }
        }
        worst = worst.max((got.mean_iou - sum / present as f64).abs());
    }
    Ok(CheckResult { name: "miou", max_deviation: worst, cases })
}

/// All formula oracles; each entry must come in under [`ORACLE_TOL`].
pub fn formula_oracles(cases: usize) -> Result<Vec<CheckResult>> {
    Ok(vec![
        oracle_distribution_distance(cases)?,
        oracle_compute_weights(cases)?,
        oracle_alpha(cases)?,
        oracle_l1(cases)?,
        oracle_miou(cases)?,
    ])
}
