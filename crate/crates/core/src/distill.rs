//! Training loops: supervised teacher training, the data-driven distillation
//! reference, and the three data-free distillation strategies (unweighted,
//! fixed per-sample weights, progressive weights).
//!
//! The iteration counter t counts optimizer steps; the total I is
//! steps-per-epoch × epochs and must be even so the progressive schedule's
//! halfway point I/2 is an integer boundary. The progressive weight
//! `alpha(t) = ω + (1 − ω)·t/(I/2)` for t ≤ I/2 and exactly 1 afterwards, so
//! the second half of training optimizes the plain unweighted objective.
//!
//! Supervised loops run student batchnorm on batch statistics and accumulate
//! running estimates. The data-free loops instead freeze the student's
//! normalization at its initial running statistics: output matching needs
//! the train-time function to be the eval-time function, and a student
//! initialized at the teacher is then an exact stationary point of the loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batchnorm::Mode;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::evaluate_network;
use crate::layer::Tape;
use crate::loss::{
    l1_loss, softmax_backward, softmax_channels, softmax_cross_entropy,
    softmax_cross_entropy_backward,
};
use crate::nets::{build_network, Network, NetworkSpec};
use crate::optim::cosine_lr;
use crate::parallel::par_map;
use crate::rng::{derive_seed, Rng};
use crate::sampler::{SelectionResult, Strategy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdSpace {
    Logits,
    Probs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    Vanilla,
    Wdd,
    Wdpd,
}

impl DistillMethod {
    pub fn name(self) -> &'static str {
        match self {
            DistillMethod::Vanilla => "vanilla",
            DistillMethod::Wdd => "wdd",
            DistillMethod::Wdpd => "wdpd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps I; must be even and positive.
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Trade-off of the distillation term in the data-driven reference.
    pub lambda: f64,
    pub kd_space: KdSpace,
}

impl TrainConfig {
    /// Build a config for `epochs` passes over a dataset of `n` samples.
    pub fn for_epochs(
        epochs: usize,
        n: usize,
        batch_size: usize,
        base_lr: f64,
        momentum: f64,
        seed: u64,
    ) -> Result<TrainConfig> {
        if n == 0 || epochs == 0 {
            return Err(Error::invalid("training needs a non-empty dataset and epochs >= 1"));
        }
        let cfg = TrainConfig {
            total_iters: epochs * steps_per_epoch(n, batch_size)?,
            batch_size,
            base_lr,
            momentum,
            seed,
            lambda: 1.0,
            kd_space: KdSpace::Logits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::invalid("total iteration count must be > 0"));
        }
        if self.total_iters % 2 != 0 {
            return Err(Error::invalid(format!(
                "total iteration count {} must be even (the weight schedule switches at I/2); \
                 adjust epochs or batch size",
                self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        Ok(())
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if n == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(n.div_ceil(batch_size))
}

/// Progressive per-sample weight: starts at the base weight, reaches 1 at
/// the halfway iteration, and stays there.
pub fn alpha(t: usize, omega: f64, total_iters: usize) -> Result<f64> {
    if total_iters == 0 || total_iters % 2 != 0 {
        return Err(Error::invalid("alpha needs an even, positive total iteration count"));
    }
    if t > total_iters {
        return Err(Error::invalid(format!("iteration {t} exceeds total {total_iters}")));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!("base weight {omega} outside [0, 1]")));
    }
    let half = (total_iters / 2) as f64;
    if t as f64 > half {
        Ok(1.0)
    } else {
        Ok(omega + (1.0 - omega) * t as f64 / half)
    }
}

/// Iteration state of the progressive schedule over one selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub t: usize,
    pub total_iters: usize,
    pub base_weights: Vec<f64>,
    pub current_weights: Vec<f64>,
}

impl ScheduleState {
    pub fn new(base_weights: Vec<f64>, total_iters: usize) -> Result<ScheduleState> {
        let current_weights = base_weights
            .iter()
            .map(|&w| alpha(0, w, total_iters))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScheduleState { t: 0, total_iters, base_weights, current_weights })
    }

    pub fn advance(&mut self) -> Result<()> {
        self.t += 1;
        for (cur, &base) in self.current_weights.iter_mut().zip(&self.base_weights) {
            *cur = alpha(self.t.min(self.total_iters), base, self.total_iters)?;
        }
        Ok(())
    }
}

/// One per-epoch metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou_val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,lr,loss,miou_val\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9},{:.9},{}\n",
                r.epoch,
                r.step,
                r.lr,
                r.loss,
                r.miou_val.map(|v| format!("{v:.9}")).unwrap_or_default()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

// ---------------------------------------------------------------------------
// Supervised training (teacher, and the data-driven reference)
// ---------------------------------------------------------------------------

struct KdTerm<'a> {
    teacher: &'a Network,
    lambda: f64,
    space: KdSpace,
}

fn gather_batch(corpus: &Corpus, ids: &[u32]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut images = Vec::with_capacity(ids.len());
    let mut labels = Vec::new();
    for &id in ids {
        let r = corpus.record(id)?;
        images.push(&r.pixels);
        labels.extend_from_slice(
            r.labels
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("record {id} has no labels")))?,
        );
    }
    Ok((Tensor::stack(&images)?, labels))
}

fn run_supervised(
    spec: &NetworkSpec,
    corpus: &Corpus,
    val: Option<&Corpus>,
    cfg: &TrainConfig,
    kd: Option<KdTerm<'_>>,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if corpus.manifest.class_count != spec.class_count {
        return Err(Error::mismatch(format!(
            "corpus has {} classes, network expects {}",
            corpus.manifest.class_count, spec.class_count
        )));
    }
    let n = corpus.len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size)?;
    if cfg.total_iters % per_epoch != 0 {
        return Err(Error::invalid(format!(
            "total iterations {} not a whole number of epochs ({} steps each)",
            cfg.total_iters, per_epoch
        )));
    }
    let epochs = cfg.total_iters / per_epoch;

    let mut net = build_network(spec, derive_seed(cfg.seed, "init"))?;
    net.set_mode(Mode::Train);
    let mut opt = net.sgd_state();
    let mut tape = Tape::new();
    let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<u32> = corpus.records.iter().map(|r| r.id).collect();
    let mut log = TrainLog::default();
    let mut t = 0usize;

    for epoch in 0..epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut epoch_samples = 0usize;
        let mut last_lr = cfg.base_lr;
        for batch_ids in order.chunks(cfg.batch_size) {
            let (x, labels) = gather_batch(corpus, batch_ids)?;
            let logits = net.forward_cached(&x, &mut tape)?;
            let (ce, ce_cache) = softmax_cross_entropy(&logits, &labels)?;
            let mut d_logits = softmax_cross_entropy_backward(&ce_cache)?;
            let mut batch_loss = ce as f64;

            if let Some(kd) = &kd {
                if kd.lambda > 0.0 {
                    let teacher_out = kd.teacher.forward_eval(&x)?;
                    let (kd_loss, d_kd) =
                        kd_loss_and_grad(&logits, &teacher_out, kd.space, None)?;
                    batch_loss += kd.lambda * kd_loss;
                    let lam = kd.lambda as f32;
                    for (d, g) in d_logits.data_mut().iter_mut().zip(d_kd.data()) {
                        *d += lam * *g;
                    }
                }
            }

            let grads = net.backward(&tape, &d_logits)?;
            let lr = cosine_lr(t, cfg.total_iters, cfg.base_lr)?;
            last_lr = lr;
            net.sgd_step(&grads, &mut opt, lr as f32, cfg.momentum as f32)?;
            t += 1;
            epoch_loss += batch_loss * batch_ids.len() as f64;
            epoch_samples += batch_ids.len();
        }

        let miou_val = match val {
            Some(v) => Some(evaluate_network(&net, v)?.miou.mean_iou),
            None => None,
        };
        log.rows.push(LogRow {
            epoch: epoch + 1,
            step: t,
            lr: last_lr,
            loss: epoch_loss / epoch_samples as f64,
            miou_val,
        });
    }

    net.set_mode(Mode::Eval);
    Ok((net, log))
}

/// Supervised teacher training with per-pixel cross-entropy, SGD momentum
/// and the cosine schedule. The returned network is frozen to eval mode.
pub fn train_teacher(
    corpus: &Corpus,
    val: Option<&Corpus>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    run_supervised(spec, corpus, val, cfg, None)
}

/// Data-driven reference: cross-entropy plus λ times the output-matching
/// loss against a frozen teacher. With λ = 0 this is exactly plain
/// supervised training of the student architecture.
pub fn kd_with_original_data(
    teacher: &Network,
    student_spec: &NetworkSpec,
    corpus: &Corpus,
    val: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    if teacher.mode() != Mode::Eval {
        return Err(Error::invalid("teacher must be frozen in eval mode"));
    }
    let kd = KdTerm { teacher, lambda: cfg.lambda, space: cfg.kd_space };
    run_supervised(student_spec, corpus, val, cfg, Some(kd))
}

// ---------------------------------------------------------------------------
// Data-free distillation
// ---------------------------------------------------------------------------

/// Per-sample weighted mean-absolute-error between a student batch and
/// fixed targets, plus its gradient with respect to the student output.
/// `weights` are per sample; the batch loss is mean_i(w_i · L1_i).
fn kd_loss_and_grad(
    student_out: &Tensor<f32>,
    targets: &Tensor<f32>,
    space: KdSpace,
    weights: Option<&[f64]>,
) -> Result<(f64, Tensor<f32>)> {
    if !student_out.same_shape(targets) {
        return Err(Error::shape(format!(
            "student output {:?} vs target {:?}",
            student_out.shape(),
            targets.shape()
        )));
    }
    let (b, k, h, w) = student_out.dims4()?;
    let per_sample = k * h * w;
    let compare: Tensor<f32> = match space {
        KdSpace::Logits => student_out.clone(),
        KdSpace::Probs => softmax_channels(student_out)?,
    };

    let mut loss = 0.0f64;
    let mut d_compare = Tensor::zeros(student_out.shape());
    {
        let s = compare.data();
        let tg = targets.data();
        let d = d_compare.data_mut();
        for i in 0..b {
            let wgt = weights.map_or(1.0, |ws| ws[i]);
            let scale = (wgt / (b as f64 * per_sample as f64)) as f32;
            let base = i * per_sample;
            let mut abs_sum = 0.0f64;
            for j in base..base + per_sample {
                let diff = s[j] - tg[j];
                abs_sum += diff.abs() as f64;
                d[j] = diff.signum() * scale;
                if diff == 0.0 {
                    d[j] = 0.0;
                }
            }
            loss += wgt * abs_sum / per_sample as f64;
        }
    }
    let loss = loss / b as f64;
    let d_logits = match space {
        KdSpace::Logits => d_compare,
        KdSpace::Probs => softmax_backward(&compare, &d_compare)?,
    };
    Ok((loss, d_logits))
}

pub struct DistillOutcome {
    pub student: Network,
    pub log: TrainLog,
}

/// Precompute frozen teacher targets for each selected sample, in kd space.
pub fn teacher_targets(
    teacher: &Network,
    corpus: &Corpus,
    ids: &[u32],
    space: KdSpace,
) -> Result<Vec<Tensor<f32>>> {
    if teacher.mode() != Mode::Eval {
        return Err(Error::invalid("teacher must be frozen in eval mode"));
    }
    let records = ids.iter().map(|id| corpus.record(*id)).collect::<Result<Vec<_>>>()?;
    par_map(&records, |_, r| -> Result<Tensor<f32>> {
        let logits = teacher.forward_eval(&r.pixels)?;
        match space {
            KdSpace::Logits => Ok(logits),
            KdSpace::Probs => softmax_channels(&logits),
        }
    })
    .into_iter()
    .collect()
}

fn base_weights_for(method: DistillMethod, selection: &SelectionResult) -> Result<Vec<f64>> {
    match method {
        DistillMethod::Vanilla => Ok(vec![1.0; selection.ids.len()]),
        DistillMethod::Wdd | DistillMethod::Wdpd => {
            if selection.strategy == Strategy::Ads && selection.scores.is_none() {
                return Err(Error::invalid(
                    "weighted distillation needs the selection's distance weights, but the \
                     selection carries none",
                ));
            }
            Ok(selection.weights())
        }
    }
}

/// Shared engine for the three distillation strategies. The student starts
/// from `student`, which the caller builds (seeded) or copies from an
/// existing network; its batchnorm normalization is frozen at the initial
/// running statistics for the whole run.
pub fn run_distillation(
    teacher: &Network,
    mut student: Network,
    corpus: &Corpus,
    selection: &SelectionResult,
    method: DistillMethod,
    cfg: &TrainConfig,
    val: Option<&Corpus>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if selection.ids.is_empty() {
        return Err(Error::invalid("empty selection"));
    }
    if teacher.mode() != Mode::Eval {
        return Err(Error::invalid("teacher must be frozen in eval mode"));
    }
    if selection.corpus_config_hash != corpus.manifest.config_hash
        || selection.corpus_seed != corpus.manifest.seed
    {
        return Err(Error::mismatch(
            "selection was made on a different corpus (config hash or seed differs)",
        ));
    }
    let n = selection.ids.len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size)?;
    if cfg.total_iters % per_epoch != 0 {
        return Err(Error::invalid(format!(
            "total iterations {} not a whole number of epochs ({} steps each)",
            cfg.total_iters, per_epoch
        )));
    }
    let epochs = cfg.total_iters / per_epoch;
    let base_weights = base_weights_for(method, selection)?;

    let targets = teacher_targets(teacher, corpus, &selection.ids, cfg.kd_space)?;

    student.set_mode(Mode::Eval);
    let mut opt = student.sgd_state();
    let mut tape = Tape::new();
    let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut t = 0usize;

    for epoch in 0..epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut epoch_samples = 0usize;
        let mut last_lr = cfg.base_lr;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor<f32>> = batch
                .iter()
                .map(|&i| Ok(&corpus.record(selection.ids[i])?.pixels))
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&images)?;
            let target_refs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &targets[i]).collect();
            let target = Tensor::stack(&target_refs)?;
            let step_weights: Vec<f64> = batch
                .iter()
                .map(|&i| match method {
                    DistillMethod::Vanilla => Ok(1.0),
                    DistillMethod::Wdd => Ok(base_weights[i]),
                    DistillMethod::Wdpd => alpha(t, base_weights[i], cfg.total_iters),
                })
                .collect::<Result<Vec<_>>>()?;

            let out = student.forward_cached(&x, &mut tape)?;
            let (batch_loss, d_logits) =
                kd_loss_and_grad(&out, &target, cfg.kd_space, Some(&step_weights))?;
            let grads = student.backward(&tape, &d_logits)?;
            let lr = cosine_lr(t, cfg.total_iters, cfg.base_lr)?;
            last_lr = lr;
            student.sgd_step(&grads, &mut opt, lr as f32, cfg.momentum as f32)?;
            t += 1;
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_samples += batch.len();
        }

        let miou_val = match val {
            Some(v) => Some(evaluate_network(&student, v)?.miou.mean_iou),
            None => None,
        };
        log.rows.push(LogRow {
            epoch: epoch + 1,
            step: t,
            lr: last_lr,
            loss: epoch_loss / epoch_samples as f64,
            miou_val,
        });
    }

    Ok(DistillOutcome { student, log })
}

fn seeded_student(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Network> {
    build_network(spec, derive_seed(cfg.seed, "student-init"))
}

/// Unweighted output matching over the selected subset.
pub fn distill_vanilla(
    teacher: &Network,
    student_spec: &NetworkSpec,
    corpus: &Corpus,
    selection: &SelectionResult,
    cfg: &TrainConfig,
    val: Option<&Corpus>,
) -> Result<DistillOutcome> {
    let student = seeded_student(student_spec, cfg)?;
    run_distillation(teacher, student, corpus, selection, DistillMethod::Vanilla, cfg, val)
}

/// Output matching with fixed per-sample distance weights.
pub fn distill_wdd(
    teacher: &Network,
    student_spec: &NetworkSpec,
    corpus: &Corpus,
    selection: &SelectionResult,
    cfg: &TrainConfig,
    val: Option<&Corpus>,
) -> Result<DistillOutcome> {
    let student = seeded_student(student_spec, cfg)?;
    run_distillation(teacher, student, corpus, selection, DistillMethod::Wdd, cfg, val)
}

/// Output matching with weights that ramp from the distance weights to
/// uniform by the halfway iteration.
pub fn distill_wdpd(
    teacher: &Network,
    student_spec: &NetworkSpec,
    corpus: &Corpus,
    selection: &SelectionResult,
    cfg: &TrainConfig,
    val: Option<&Corpus>,
) -> Result<DistillOutcome> {
    let student = seeded_student(student_spec, cfg)?;
    run_distillation(teacher, student, corpus, selection, DistillMethod::Wdpd, cfg, val)
}

/// Weighted dataset loss at fixed parameters: mean_i(w_i · L1_i) over the
/// whole selection with eval-mode forwards. Used for fixed-point checks and
/// loss-normalization diagnostics.
pub fn selection_loss(
    student: &Network,
    corpus: &Corpus,
    ids: &[u32],
    targets: &[Tensor<f32>],
    weights: &[f64],
    space: KdSpace,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("empty selection"));
    }
    let mut total = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        let out = student.forward_eval(&corpus.record(id)?.pixels)?;
        let compare = match space {
            KdSpace::Logits => out,
            KdSpace::Probs => softmax_channels(&out)?,
        };
        total += weights[i] * l1_loss(&compare, &targets[i])?.to_f64();
    }
    Ok(total / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_bytes;
    use crate::corpus::{gen_openworld, gen_original, GeneratorConfig};
    use crate::nets::{student_spec, teacher_spec};
    use crate::sampler::{ads_select, random_select, DistanceConfig};

    fn tiny_cfg(epochs: usize, n: usize, seed: u64) -> TrainConfig {
        TrainConfig::for_epochs(epochs, n, 8, 0.05, 0.9, seed).unwrap()
    }

    fn quick_teacher(seed: u64) -> (Network, Corpus) {
        let gcfg = GeneratorConfig::default();
        let corpus = gen_original(&gcfg, seed, 24, "orig").unwrap();
        let cfg = tiny_cfg(2, 24, seed);
        let (net, _) = train_teacher(&corpus, None, &teacher_spec(), &cfg).unwrap();
        (net, corpus)
    }

    #[test]
    fn alpha_boundaries_and_midpoint() {
        assert_eq!(alpha(0, 0.3, 100).unwrap(), 0.3);
        assert_eq!(alpha(50, 0.3, 100).unwrap(), 1.0);
        assert_eq!(alpha(75, 0.3, 100).unwrap(), 1.0);
        assert!((alpha(25, 0.4, 100).unwrap() - 0.7).abs() < 1e-12);
        assert!(alpha(101, 0.5, 100).is_err());
        assert!(alpha(10, 0.5, 99).is_err());
        assert!(alpha(10, 1.5, 100).is_err());
    }

    #[test]
    fn alpha_is_nondecreasing_and_clamped_over_a_grid() {
        for &total in &[4usize, 10, 100, 1000] {
            for &omega in &[0.0, 0.25, 0.5, 0.9, 1.0] {
                let mut prev = -1.0f64;
                for t in 0..=total {
                    let a = alpha(t, omega, total).unwrap();
                    assert!((omega..=1.0).contains(&a), "alpha {a} outside [{omega}, 1]");
                    assert!(a >= prev, "alpha decreased at t={t}");
                    if t as f64 >= total as f64 / 2.0 {
                        assert_eq!(a, 1.0);
                    }
                    prev = a;
                }
            }
        }
    }

    #[test]
    fn schedule_state_tracks_alpha() {
        let mut s = ScheduleState::new(vec![0.0, 0.5, 1.0], 10).unwrap();
        assert_eq!(s.current_weights, vec![0.0, 0.5, 1.0]);
        for _ in 0..5 {
            s.advance().unwrap();
        }
        assert_eq!(s.current_weights, vec![1.0, 1.0, 1.0]);
        assert!(s.current_weights.iter().zip(&s.base_weights).all(|(c, b)| c >= b));
    }

    #[test]
    fn config_rejects_odd_iteration_totals() {
        let cfg = TrainConfig {
            total_iters: 7,
            batch_size: 4,
            base_lr: 0.1,
            momentum: 0.9,
            seed: 0,
            lambda: 1.0,
            kd_space: KdSpace::Logits,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn teacher_training_reduces_loss_and_is_deterministic() {
        let gcfg = GeneratorConfig::default();
        let corpus = gen_original(&gcfg, 5, 32, "orig").unwrap();
        let cfg = tiny_cfg(3, 32, 5);
        let (net_a, log_a) = train_teacher(&corpus, None, &teacher_spec(), &cfg).unwrap();
        assert!(
            log_a.rows.last().unwrap().loss < log_a.rows.first().unwrap().loss,
            "loss did not decrease: {:?}",
            log_a.rows
        );
        let (net_b, log_b) = train_teacher(&corpus, None, &teacher_spec(), &cfg).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(checkpoint_bytes(&net_a).unwrap(), checkpoint_bytes(&net_b).unwrap());
    }

    #[test]
    fn kd_reference_with_zero_lambda_is_plain_supervised_training() {
        let (teacher, corpus) = quick_teacher(11);
        let mut cfg = tiny_cfg(2, 24, 11);
        cfg.lambda = 0.0;
        let (kd_net, kd_log) =
            kd_with_original_data(&teacher, &student_spec(), &corpus, None, &cfg).unwrap();
        let (plain_net, plain_log) =
            train_teacher(&corpus, None, &student_spec(), &cfg).unwrap();
        assert_eq!(kd_log, plain_log);
        assert_eq!(
            checkpoint_bytes(&kd_net).unwrap(),
            checkpoint_bytes(&plain_net).unwrap()
        );
    }

    #[test]
    fn large_lambda_pulls_student_logits_toward_the_teacher() {
        let (teacher, corpus) = quick_teacher(13);
        let ids: Vec<u32> = corpus.records.iter().map(|r| r.id).collect();
        let targets = teacher_targets(&teacher, &corpus, &ids, KdSpace::Logits).unwrap();
        let ones = vec![1.0; ids.len()];

        let fresh = build_network(&student_spec(), derive_seed(13, "student-init")).unwrap();
        let before =
            selection_loss(&fresh, &corpus, &ids, &targets, &ones, KdSpace::Logits).unwrap();

        let mut cfg = tiny_cfg(4, 24, 13);
        cfg.lambda = 50.0;
        let (net, _) =
            kd_with_original_data(&teacher, &student_spec(), &corpus, None, &cfg).unwrap();
        let after =
            selection_loss(&net, &corpus, &ids, &targets, &ones, KdSpace::Logits).unwrap();
        assert!(after < before, "L1 to teacher went {before} -> {after}");
    }

    #[test]
    fn distillation_fixed_point_at_teacher_initialization() {
        let (teacher, _) = quick_teacher(17);
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 18, 16, [1.0, 0.0, 0.0], "open").unwrap();
        let selection = random_select(&open, 16, 1).unwrap();
        let cfg = tiny_cfg(2, 16, 17);

        let ids = selection.ids.clone();
        let targets = teacher_targets(&teacher, &open, &ids, cfg.kd_space).unwrap();
        let ones = vec![1.0; ids.len()];
        let loss0 =
            selection_loss(&teacher, &open, &ids, &targets, &ones, cfg.kd_space).unwrap();
        assert_eq!(loss0, 0.0, "matching outputs must give zero loss");

        // Student = teacher clone: zero loss, zero (sub)gradient, stationary.
        let outcome = run_distillation(
            &teacher,
            teacher.clone(),
            &open,
            &selection,
            DistillMethod::Vanilla,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(outcome.log.rows[0].loss, 0.0);
        assert_eq!(
            checkpoint_bytes(&outcome.student).unwrap(),
            checkpoint_bytes(&teacher).unwrap(),
            "parameters moved despite zero gradients"
        );
    }

    #[test]
    fn all_one_weights_reproduce_vanilla_bit_exactly() {
        let (teacher, _) = quick_teacher(19);
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 20, 20, [1.0, 0.0, 0.0], "open").unwrap();
        // Force an all-ones weight vector through a degenerate selection:
        // random strategy carries no scores, so weights default to 1.
        let selection = random_select(&open, 20, 2).unwrap();
        let cfg = tiny_cfg(2, 20, 19);

        let v = distill_vanilla(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        let w = distill_wdd(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        let p = distill_wdpd(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        let vb = checkpoint_bytes(&v.student).unwrap();
        assert_eq!(vb, checkpoint_bytes(&w.student).unwrap());
        assert_eq!(vb, checkpoint_bytes(&p.student).unwrap());
        assert_eq!(v.log, w.log);
        assert_eq!(v.log, p.log);
    }

    #[test]
    fn zero_weight_samples_contribute_exactly_zero_gradient() {
        let mut rng = crate::rng::Rng::new(3);
        let data: Vec<f32> = (0..2 * 4 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let out = Tensor::from_vec(&[2, 4, 3, 3], data.clone()).unwrap();
        let target_data: Vec<f32> =
            (0..2 * 4 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let target = Tensor::from_vec(&[2, 4, 3, 3], target_data).unwrap();
        let (_, d) = kd_loss_and_grad(&out, &target, KdSpace::Logits, Some(&[0.0, 1.0])).unwrap();
        let per_sample = 4 * 3 * 3;
        assert!(d.data()[..per_sample].iter().all(|&g| g == 0.0));
        assert!(d.data()[per_sample..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn weighted_batch_loss_matches_a_scalar_oracle() {
        let out = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0f32, 2.0, -1.0, 0.5]).unwrap();
        let target = Tensor::from_vec(&[2, 1, 1, 2], vec![0.0f32, 0.0, 0.0, 0.0]).unwrap();
        let weights = [0.25, 0.75];
        let (loss, d) = kd_loss_and_grad(&out, &target, KdSpace::Logits, Some(&weights)).unwrap();
        // Sample L1s: (1+2)/2 = 1.5 and (1+0.5)/2 = 0.75.
        let expected = (0.25 * 1.5 + 0.75 * 0.75) / 2.0;
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        // Gradient of sample 0: sign(+)·0.25/(2·2) each element.
        assert!((d.data()[0] - 0.0625).abs() < 1e-7);
        assert!((d.data()[2] + 0.1875).abs() < 1e-7);
    }

    #[test]
    fn wdpd_single_step_gradient_matches_scalar_oracle() {
        // α = (1, 0.5) on a 2-sample batch: the per-element gradients are
        // sign(diff)·α_i/(B·P).
        let out = Tensor::from_vec(&[2, 1, 1, 2], vec![2.0f32, -3.0, 4.0, 0.0]).unwrap();
        let target = Tensor::from_vec(&[2, 1, 1, 2], vec![0.0f32, 0.0, 1.0, 0.0]).unwrap();
        let (_, d) = kd_loss_and_grad(&out, &target, KdSpace::Logits, Some(&[1.0, 0.5])).unwrap();
        assert_eq!(d.data()[0], 0.25); // +1 · 1/(2·2)
        assert_eq!(d.data()[1], -0.25);
        assert_eq!(d.data()[2], 0.125); // +1 · 0.5/(2·2)
        assert_eq!(d.data()[3], 0.0); // tie -> subgradient 0
    }

    #[test]
    fn duplicating_every_sample_preserves_the_mean_loss() {
        let (teacher, _) = quick_teacher(23);
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 24, 10, [0.4, 0.3, 0.3], "open").unwrap();
        let ids: Vec<u32> = open.records.iter().map(|r| r.id).collect();
        let targets = teacher_targets(&teacher, &open, &ids, KdSpace::Logits).unwrap();
        let student = build_network(&student_spec(), 7).unwrap();
        let weights: Vec<f64> = (0..ids.len()).map(|i| (i % 3) as f64 / 2.0).collect();

        let single =
            selection_loss(&student, &open, &ids, &targets, &weights, KdSpace::Logits).unwrap();

        let mut ids2 = ids.clone();
        ids2.extend_from_slice(&ids);
        let mut targets2 = targets.clone();
        targets2.extend_from_slice(&targets);
        let mut weights2 = weights.clone();
        weights2.extend_from_slice(&weights);
        let doubled =
            selection_loss(&student, &open, &ids2, &targets2, &weights2, KdSpace::Logits).unwrap();
        assert!((single - doubled).abs() < 1e-6, "{single} vs {doubled}");
    }

    #[test]
    fn wdpd_batch_loss_equals_vanilla_after_the_halfway_point() {
        let out = Tensor::from_vec(&[2, 1, 1, 2], vec![1.5f32, -0.5, 2.0, 0.25]).unwrap();
        let target = Tensor::from_vec(&[2, 1, 1, 2], vec![0.5f32, 0.5, 0.5, 0.5]).unwrap();
        let total = 100;
        for t in [51usize, 60, 99] {
            let alphas: Vec<f64> = [0.2, 0.7]
                .iter()
                .map(|&w| alpha(t, w, total).unwrap())
                .collect();
            let (wdpd_loss, wdpd_grad) =
                kd_loss_and_grad(&out, &target, KdSpace::Logits, Some(&alphas)).unwrap();
            let (vanilla_loss, vanilla_grad) =
                kd_loss_and_grad(&out, &target, KdSpace::Logits, Some(&[1.0, 1.0])).unwrap();
            assert_eq!(wdpd_loss, vanilla_loss);
            assert_eq!(wdpd_grad.data(), vanilla_grad.data());
        }
    }

    #[test]
    fn teacher_is_never_mutated_by_distillation() {
        let (teacher, _) = quick_teacher(29);
        let before = checkpoint_bytes(&teacher).unwrap();
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 30, 12, [0.5, 0.25, 0.25], "open").unwrap();
        let selection =
            ads_select(&teacher, &open, 8, &DistanceConfig::default()).unwrap();
        let cfg = tiny_cfg(2, 8, 29);
        distill_wdpd(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        assert_eq!(before, checkpoint_bytes(&teacher).unwrap());
    }

    #[test]
    fn probs_space_trains_too() {
        let (teacher, _) = quick_teacher(31);
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 32, 12, [1.0, 0.0, 0.0], "open").unwrap();
        let selection = random_select(&open, 12, 3).unwrap();
        let mut cfg = tiny_cfg(2, 12, 31);
        cfg.kd_space = KdSpace::Probs;
        let out =
            distill_vanilla(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        assert!(out.log.rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn seeded_distillation_halves_its_initial_loss() {
        let (teacher, _) = quick_teacher(37);
        let gcfg = GeneratorConfig::default();
        let open = gen_openworld(&gcfg, 38, 32, [1.0, 0.0, 0.0], "open").unwrap();
        let selection = random_select(&open, 32, 5).unwrap();
        let cfg = TrainConfig::for_epochs(10, 32, 8, 0.05, 0.9, 37).unwrap();

        let ids = selection.ids.clone();
        let targets = teacher_targets(&teacher, &open, &ids, cfg.kd_space).unwrap();
        let ones = vec![1.0; ids.len()];
        let student0 = seeded_student(&student_spec(), &cfg).unwrap();
        let before =
            selection_loss(&student0, &open, &ids, &targets, &ones, cfg.kd_space).unwrap();
        let outcome =
            distill_vanilla(&teacher, &student_spec(), &open, &selection, &cfg, None).unwrap();
        let after =
            selection_loss(&outcome.student, &open, &ids, &targets, &ones, cfg.kd_space).unwrap();
        assert!(after < 0.5 * before, "loss {before} -> {after}");
    }
}
