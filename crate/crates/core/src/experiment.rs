//! Experiment orchestration: a single TOML-configurable pipeline that
//! generates corpora, trains the teacher, scores and selects open-world
//! samples with every strategy, distills students with every method, and
//! emits a machine-readable report.
//!
//! Every stage writes its artifacts under one output directory and stamps it
//! with the experiment config hash; stages refuse to mix artifacts from
//! different configs. Reports are canonical JSON with a stable field order;
//! wall-clock timing goes to the text summary only, so identical seeds
//! produce byte-identical reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{gen_openworld, gen_original, hex, load_corpus, write_corpus, Corpus, GeneratorConfig, Stratum};
use crate::distill::{
    run_distillation, DistillMethod, KdSpace, TrainConfig,
};
use crate::entropy::{check_selection_principles, PrinciplesReport, DEFAULT_CARDINALITY_RATIO};
use crate::error::{Error, Result};
use crate::eval::{evaluate_network, performance_gap, EvalReport};
use crate::nets::{build_network, student_spec, teacher_spec, Network, NetworkSpec};
use crate::rng::derive_seed;
use crate::sampler::{
    ads_select_from_scores, confidence_select_from_scores, csv_rows, export_stats_csv,
    harvest_bn_reference, random_select, score_corpus, DistanceConfig, ScoredSample,
    SelectionResult, Strategy,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub n_original_train: usize,
    pub n_original_test: usize,
    pub n_openworld: usize,
    pub mix: [f64; 3],
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_original_train: 200,
            n_original_test: 60,
            n_openworld: 2000,
            mix: [0.3, 0.3, 0.4],
            height: 32,
            width: 32,
            class_count: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection { epochs: 20, batch_size: 16, lr: 0.05, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epsilon: usize,
    pub lambda: f64,
    pub kd_space: KdSpace,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            epochs: 14,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            epsilon: 700,
            lambda: 1.0,
            kd_space: KdSpace::Logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSection {
    pub distance: DistanceConfig,
    /// Extra selection sizes whose stratum composition is reported without
    /// training anything.
    pub diagnostic_epsilons: Vec<usize>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection { distance: DistanceConfig::default(), diagnostic_epsilons: vec![100, 200] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub sampling: SamplingSection,
    /// Reuse the vanilla student for weighted cells whose effective weights
    /// are all exactly 1 (the runs are provably bit-identical).
    pub dedup_identical_runs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            corpus: CorpusSection::default(),
            teacher: TeacherSection::default(),
            distill: DistillSection::default(),
            sampling: SamplingSection::default(),
            dedup_identical_runs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.corpus.mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("corpus mix sums to {sum}, expected 1")));
        }
        if self.distill.epsilon == 0 || self.distill.epsilon > self.corpus.n_openworld {
            return Err(Error::invalid(format!(
                "epsilon {} must be in [1, open-world size {}]",
                self.distill.epsilon, self.corpus.n_openworld
            )));
        }
        if self.corpus.n_original_train == 0 || self.corpus.n_original_test == 0 {
            return Err(Error::invalid("original train/test sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            height: self.corpus.height,
            width: self.corpus.width,
            class_count: self.corpus.class_count,
        }
    }

    /// Hash of the full config including the seed; identifies one run.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Hash with the seed zeroed out; identifies the benchmark itself, so
    /// runs of different seeds under one config aggregate together.
    pub fn benchmark_hash_hex(&self) -> String {
        let mut seedless = self.clone();
        seedless.seed = 0;
        seedless.hash_hex()
    }

    pub fn teacher_train_config(&self) -> Result<TrainConfig> {
        TrainConfig::for_epochs(
            self.teacher.epochs,
            self.corpus.n_original_train,
            self.teacher.batch_size,
            self.teacher.lr,
            self.teacher.momentum,
            derive_seed(self.seed, "teacher"),
        )
    }

    pub fn distill_train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::for_epochs(
            self.distill.epochs,
            self.distill.epsilon,
            self.distill.batch_size,
            self.distill.lr,
            self.distill.momentum,
            derive_seed(self.seed, "distill"),
        )?;
        cfg.lambda = self.distill.lambda;
        cfg.kd_space = self.distill.kd_space;
        Ok(cfg)
    }

    pub fn teacher_spec(&self) -> NetworkSpec {
        NetworkSpec {
            in_channels: 3,
            height: self.corpus.height,
            width: self.corpus.width,
            class_count: self.corpus.class_count,
            ..teacher_spec()
        }
    }

    pub fn student_spec(&self) -> NetworkSpec {
        NetworkSpec {
            in_channels: 3,
            height: self.corpus.height,
            width: self.corpus.width,
            class_count: self.corpus.class_count,
            ..student_spec()
        }
    }
}

// ---------------------------------------------------------------------------
// Output directory layout and the config stamp
// ---------------------------------------------------------------------------

pub fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

pub fn teacher_ckpt_path(out: &Path) -> PathBuf {
    out.join("teacher.ckpt")
}

pub fn student_ckpt_path(out: &Path, strategy: Strategy, method: DistillMethod) -> PathBuf {
    out.join(format!("student_{}_{}.ckpt", strategy.name(), method.name()))
}

pub fn selection_path(out: &Path, strategy: Strategy) -> PathBuf {
    out.join(format!("selection_{}.json", strategy.name()))
}

pub fn report_path(out: &Path) -> PathBuf {
    out.join("report.json")
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    config_hash: String,
    config: ExperimentConfig,
}

/// Stamp the output directory with the config hash, or refuse if it is
/// already stamped with a different one.
pub fn ensure_stamp(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("experiment.json");
    let hash = cfg.hash_hex();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let stamp: Stamp = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if stamp.config_hash != hash {
            return Err(Error::mismatch(format!(
                "output directory {} was produced with config hash {}, current config hashes to {hash}; \
                 use a fresh --out directory or the original config",
                out.display(),
                stamp.config_hash
            )));
        }
        return Ok(());
    }
    let stamp = Stamp { config_hash: hash, config: cfg.clone() };
    let json = serde_json::to_string_pretty(&stamp)
        .map_err(|e| Error::format(format!("stamp serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

pub const ORIGINAL_TRAIN: &str = "original_train";
pub const ORIGINAL_TEST: &str = "original_test";
pub const OPENWORLD: &str = "openworld";

pub fn stage_gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_stamp(cfg, out)?;
    let gen = cfg.generator();
    let dir = corpus_dir(out);
    let train = gen_original(
        &gen,
        derive_seed(cfg.seed, "corpus/original-train"),
        cfg.corpus.n_original_train,
        ORIGINAL_TRAIN,
    )?;
    write_corpus(&train, &dir)?;
    let test = gen_original(
        &gen,
        derive_seed(cfg.seed, "corpus/original-test"),
        cfg.corpus.n_original_test,
        ORIGINAL_TEST,
    )?;
    write_corpus(&test, &dir)?;
    let open = gen_openworld(
        &gen,
        derive_seed(cfg.seed, "corpus/openworld"),
        cfg.corpus.n_openworld,
        cfg.corpus.mix,
        OPENWORLD,
    )?;
    write_corpus(&open, &dir)?;
    Ok(())
}

fn load_stage_corpus(out: &Path, name: &str) -> Result<Corpus> {
    let dir = corpus_dir(out);
    load_corpus(&dir, name).map_err(|e| match e {
        Error::Io { context, source } => Error::Io {
            context: format!("{context} (run gen-corpus first?)"),
            source,
        },
        other => other,
    })
}

pub fn stage_train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    ensure_stamp(cfg, out)?;
    let train = load_stage_corpus(out, ORIGINAL_TRAIN)?;
    let test = load_stage_corpus(out, ORIGINAL_TEST)?;
    let tc = cfg.teacher_train_config()?;
    let (teacher, log) = crate::distill::train_teacher(&train, Some(&test), &cfg.teacher_spec(), &tc)?;
    save_checkpoint(&teacher, &teacher_ckpt_path(out))?;
    log.write_csv(&out.join("teacher_train.csv"))?;
    let report = evaluate_network(&teacher, &test)?;
    write_json(&report, &out.join("teacher_eval.json"))?;
    Ok(report)
}

pub fn load_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<Network> {
    load_checkpoint(&teacher_ckpt_path(out), &cfg.teacher_spec()).map_err(|e| match e {
        Error::Io { context, source } => Error::Io {
            context: format!("{context} (run train-teacher first?)"),
            source,
        },
        other => other,
    })
}

/// Score the open-world corpus once and write all three selections plus the
/// per-sample diagnostics CSV.
pub fn stage_sample_all(
    cfg: &ExperimentConfig,
    out: &Path,
    epsilon: usize,
) -> Result<(Vec<ScoredSample>, Vec<SelectionResult>)> {
    ensure_stamp(cfg, out)?;
    let open = load_stage_corpus(out, OPENWORLD)?;
    let teacher = load_teacher(cfg, out)?;
    let reference = harvest_bn_reference(&teacher)?;
    let scores = score_corpus(&teacher, &reference, &open, &cfg.sampling.distance)?;

    let ads = ads_select_from_scores(&scores, epsilon, &open)?;
    let random = random_select(&open, epsilon, derive_seed(cfg.seed, "random-select"))?;
    let confidence = confidence_select_from_scores(&scores, epsilon, &open)?;
    for sel in [&ads, &random, &confidence] {
        write_json(sel, &selection_path(out, sel.strategy))?;
    }
    export_stats_csv(&csv_rows(&scores, Some(&ads)), &out.join("sample_scores.csv"))?;
    Ok((scores, vec![ads, random, confidence]))
}

pub fn stage_sample(
    cfg: &ExperimentConfig,
    out: &Path,
    strategy: Strategy,
    epsilon: usize,
) -> Result<SelectionResult> {
    ensure_stamp(cfg, out)?;
    let open = load_stage_corpus(out, OPENWORLD)?;
    let selection = match strategy {
        Strategy::Random => random_select(&open, epsilon, derive_seed(cfg.seed, "random-select"))?,
        Strategy::Ads | Strategy::Confidence => {
            let teacher = load_teacher(cfg, out)?;
            let reference = harvest_bn_reference(&teacher)?;
            let scores = score_corpus(&teacher, &reference, &open, &cfg.sampling.distance)?;
            if strategy == Strategy::Ads {
                let sel = ads_select_from_scores(&scores, epsilon, &open)?;
                export_stats_csv(&csv_rows(&scores, Some(&sel)), &out.join("sample_scores.csv"))?;
                sel
            } else {
                confidence_select_from_scores(&scores, epsilon, &open)?
            }
        }
    };
    write_json(&selection, &selection_path(out, strategy))?;
    Ok(selection)
}

pub fn stage_distill(
    cfg: &ExperimentConfig,
    out: &Path,
    strategy: Strategy,
    method: DistillMethod,
) -> Result<EvalReport> {
    ensure_stamp(cfg, out)?;
    let open = load_stage_corpus(out, OPENWORLD)?;
    let test = load_stage_corpus(out, ORIGINAL_TEST)?;
    let teacher = load_teacher(cfg, out)?;
    let sel_path = selection_path(out, strategy);
    if !sel_path.exists() {
        return Err(Error::invalid(format!(
            "{} missing (run sample --strategy {} first)",
            sel_path.display(),
            strategy.name()
        )));
    }
    let selection: SelectionResult = read_json(&sel_path)?;
    let dc = cfg.distill_train_config()?;
    let student = build_network(&cfg.student_spec(), derive_seed(dc.seed, "student-init"))?;
    let outcome = run_distillation(&teacher, student, &open, &selection, method, &dc, None)?;
    save_checkpoint(&outcome.student, &student_ckpt_path(out, strategy, method))?;
    outcome
        .log
        .write_csv(&out.join(format!("student_{}_{}.csv", strategy.name(), method.name())))?;
    let report = evaluate_network(&outcome.student, &test)?;
    write_json(
        &report,
        &out.join(format!("student_{}_{}_eval.json", strategy.name(), method.name())),
    )?;
    Ok(report)
}

/// Evaluate an arbitrary checkpoint (teacher or student architecture) on the
/// held-out original test split.
pub fn stage_evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<EvalReport> {
    ensure_stamp(cfg, out)?;
    let test = load_stage_corpus(out, ORIGINAL_TEST)?;
    let net = load_checkpoint(checkpoint, &cfg.teacher_spec())
        .or_else(|_| load_checkpoint(checkpoint, &cfg.student_spec()))?;
    let report = evaluate_network(&net, &test)?;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    write_json(&report, &out.join(format!("{stem}_eval.json")))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// The full pipeline and its report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub corpus_train: u64,
    pub corpus_test: u64,
    pub openworld: u64,
    pub teacher: u64,
    pub distill: u64,
    pub random_select: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonComposition {
    pub epsilon: usize,
    pub ood_fraction_ads: f64,
    pub ood_fraction_confidence: f64,
    pub ood_fraction_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDiagnostics {
    /// Mean statistic distance per stratum: [in_dist, shifted, ood].
    pub mean_d_by_stratum: [f64; 3],
    pub composition: Vec<EpsilonComposition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: Strategy,
    pub method: DistillMethod,
    pub student_miou: f64,
    pub gap: f64,
    pub final_loss: f64,
    /// Set when this cell reused another cell's provably identical student.
    pub reused_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: StageSeeds,
    pub teacher_miou: f64,
    pub principles: PrinciplesReport,
    pub sampling: SamplingDiagnostics,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, strategy: Strategy, method: DistillMethod) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.strategy == strategy && c.method == method)
    }
}

fn stratum_mean_d(scores: &[ScoredSample], stratum: Stratum) -> f64 {
    let ds: Vec<f64> =
        scores.iter().filter(|s| s.stratum == stratum).map(|s| s.distance).collect();
    if ds.is_empty() {
        f64::NAN
    } else {
        ds.iter().sum::<f64>() / ds.len() as f64
    }
}

fn ood_fraction(corpus: &Corpus, ids: &[u32]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let ood = ids
        .iter()
        .filter(|id| corpus.record(**id).map(|r| r.stratum == Stratum::Ood).unwrap_or(false))
        .count();
    ood as f64 / ids.len() as f64
}

/// Run the whole pipeline under one seed. Returns the report; artifacts and
/// the canonical report.json land in `out`.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    ensure_stamp(cfg, out)?;
    stage_gen_corpus(cfg, out)?;
    let teacher_report = stage_train_teacher(cfg, out)?;

    let open = load_stage_corpus(out, OPENWORLD)?;
    let train = load_stage_corpus(out, ORIGINAL_TRAIN)?;
    let test = load_stage_corpus(out, ORIGINAL_TEST)?;
    let teacher = load_teacher(cfg, out)?;
    let principles = check_selection_principles(&train, &open, DEFAULT_CARDINALITY_RATIO)?;

    let (scores, selections) = stage_sample_all(cfg, out, cfg.distill.epsilon)?;

    // Stratum composition diagnostics at the configured and probe sizes.
    let mut composition = Vec::new();
    let mut probe_epsilons = cfg.sampling.diagnostic_epsilons.clone();
    probe_epsilons.push(cfg.distill.epsilon);
    probe_epsilons.sort_unstable();
    probe_epsilons.dedup();
    for &eps in &probe_epsilons {
        if eps == 0 || eps > open.len() {
            continue;
        }
        let ads = ads_select_from_scores(&scores, eps, &open)?;
        let conf = confidence_select_from_scores(&scores, eps, &open)?;
        let rand = random_select(&open, eps, derive_seed(cfg.seed, "random-select"))?;
        composition.push(EpsilonComposition {
            epsilon: eps,
            ood_fraction_ads: ood_fraction(&open, &ads.ids),
            ood_fraction_confidence: ood_fraction(&open, &conf.ids),
            ood_fraction_random: ood_fraction(&open, &rand.ids),
        });
    }
    let sampling = SamplingDiagnostics {
        mean_d_by_stratum: [
            stratum_mean_d(&scores, Stratum::InDist),
            stratum_mean_d(&scores, Stratum::Shifted),
            stratum_mean_d(&scores, Stratum::Ood),
        ],
        composition,
    };

    // Distill the full grid, reusing provably identical runs.
    let dc = cfg.distill_train_config()?;
    let mut cells: Vec<CellReport> = Vec::new();
    for selection in &selections {
        let mut vanilla_eval: Option<(EvalReport, f64)> = None;
        for method in [DistillMethod::Vanilla, DistillMethod::Wdd, DistillMethod::Wdpd] {
            let weights = match method {
                DistillMethod::Vanilla => vec![1.0; selection.ids.len()],
                _ => selection.weights(),
            };
            let all_ones = weights.iter().all(|w| *w == 1.0);
            let ckpt = student_ckpt_path(out, selection.strategy, method);

            let (report, final_loss, reused_from) = if cfg.dedup_identical_runs
                && all_ones
                && method != DistillMethod::Vanilla
                && vanilla_eval.is_some()
            {
                let (ref report, loss) = *vanilla_eval.as_ref().unwrap();
                let vanilla_ckpt = student_ckpt_path(out, selection.strategy, DistillMethod::Vanilla);
                fs::copy(&vanilla_ckpt, &ckpt).map_err(|e| Error::io(&ckpt, e))?;
                (report.clone(), loss, Some(format!("student_{}_vanilla", selection.strategy.name())))
            } else {
                let student = build_network(&cfg.student_spec(), derive_seed(dc.seed, "student-init"))?;
                let outcome = run_distillation(&teacher, student, &open, selection, method, &dc, None)?;
                save_checkpoint(&outcome.student, &ckpt)?;
                outcome.log.write_csv(&out.join(format!(
                    "student_{}_{}.csv",
                    selection.strategy.name(),
                    method.name()
                )))?;
                let report = evaluate_network(&outcome.student, &test)?;
                let loss = outcome.log.final_loss().unwrap_or(f64::NAN);
                (report, loss, None)
            };

            write_json(
                &report,
                &out.join(format!(
                    "student_{}_{}_eval.json",
                    selection.strategy.name(),
                    method.name()
                )),
            )?;
            if method == DistillMethod::Vanilla {
                vanilla_eval = Some((report.clone(), final_loss));
            }
            cells.push(CellReport {
                strategy: selection.strategy,
                method,
                student_miou: report.miou.mean_iou,
                gap: performance_gap(&teacher_report, &report)?,
                final_loss,
                reused_from,
            });
        }
    }

    let config_hash = cfg.benchmark_hash_hex();
    let run_id = {
        let mut hasher = Sha256::new();
        hasher.update(config_hash.as_bytes());
        hasher.update(cfg.seed.to_le_bytes());
        hex(&hasher.finalize())[..16].to_string()
    };
    let report = ExperimentReport {
        run_id,
        config_hash,
        seed: cfg.seed,
        seeds: StageSeeds {
            corpus_train: derive_seed(cfg.seed, "corpus/original-train"),
            corpus_test: derive_seed(cfg.seed, "corpus/original-test"),
            openworld: derive_seed(cfg.seed, "corpus/openworld"),
            teacher: derive_seed(cfg.seed, "teacher"),
            distill: derive_seed(cfg.seed, "distill"),
            random_select: derive_seed(cfg.seed, "random-select"),
        },
        teacher_miou: teacher_report.miou.mean_iou,
        principles,
        sampling,
        cells,
    };
    write_json(&report, &report_path(out))?;
    let wall = started.elapsed().as_secs_f64();
    fs::write(out.join("report.txt"), text_summary(&report, Some(wall)))
        .map_err(|e| Error::io(&out.join("report.txt"), e))?;
    Ok(report)
}

/// Human-readable rendering; wall-clock lives here, never in report.json.
pub fn text_summary(report: &ExperimentReport, wall_secs: Option<f64>) -> String {
    let mut s = String::new();
    s.push_str(&format!("run {} (seed {})\n", report.run_id, report.seed));
    s.push_str(&format!("config hash {}\n", report.config_hash));
    s.push_str(&format!("teacher mIoU {:.4}\n", report.teacher_miou));
    s.push_str(&format!(
        "selection principles: cardinality_ok={} richness_ok={} task_relevance={}\n",
        report.principles.cardinality_ok,
        report.principles.richness_ok,
        report.principles.task_relevance
    ));
    let d = report.sampling.mean_d_by_stratum;
    s.push_str(&format!(
        "mean distance by stratum: in_dist {:.4}  shifted {:.4}  ood {:.4}\n",
        d[0], d[1], d[2]
    ));
    for c in &report.sampling.composition {
        s.push_str(&format!(
            "ood fraction at epsilon {}: ads {:.3}  confidence {:.3}  random {:.3}\n",
            c.epsilon, c.ood_fraction_ads, c.ood_fraction_confidence, c.ood_fraction_random
        ));
    }
    s.push_str("strategy    method   student_mIoU   gap      note\n");
    for c in &report.cells {
        s.push_str(&format!(
            "{:<11} {:<8} {:<14.4} {:<8.4} {}\n",
            c.strategy.name(),
            c.method.name(),
            c.student_miou,
            c.gap,
            c.reused_from.as_deref().unwrap_or("")
        ));
    }
    if let Some(w) = wall_secs {
        s.push_str(&format!("wall clock: {w:.1} s\n"));
    }
    s
}

// ---------------------------------------------------------------------------
// Multi-seed aggregation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub strategy: Strategy,
    pub method: DistillMethod,
    pub per_seed: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub run_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub teacher_miou_median: f64,
    pub cells: Vec<AggregateCell>,
}

/// Lower-middle median, matching the entropy report convention.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[(sorted.len() - 1) / 2]
}

pub fn aggregate_reports(reports: &[ExperimentReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let hash = &reports[0].config_hash;
    if reports.iter().any(|r| &r.config_hash != hash) {
        return Err(Error::mismatch("aggregating reports from different configs"));
    }
    let mut cells = Vec::new();
    for strategy in [Strategy::Ads, Strategy::Random, Strategy::Confidence] {
        for method in [DistillMethod::Vanilla, DistillMethod::Wdd, DistillMethod::Wdpd] {
            let per_seed: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.cell(strategy, method).map(|c| c.student_miou))
                .collect();
            if per_seed.len() != reports.len() {
                return Err(Error::format(format!(
                    "cell {}/{} missing from some reports",
                    strategy.name(),
                    method.name()
                )));
            }
            cells.push(AggregateCell {
                strategy,
                method,
                median: median(&per_seed),
                min: per_seed.iter().cloned().fold(f64::INFINITY, f64::min),
                max: per_seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                per_seed,
            });
        }
    }
    let teacher: Vec<f64> = reports.iter().map(|r| r.teacher_miou).collect();
    Ok(AggregateReport {
        run_ids: reports.iter().map(|r| r.run_id.clone()).collect(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        teacher_miou_median: median(&teacher),
        cells,
    })
}

/// Load per-run report.json files and aggregate them.
pub fn aggregate_from_dirs(dirs: &[PathBuf]) -> Result<AggregateReport> {
    let reports: Vec<ExperimentReport> =
        dirs.iter().map(|d| read_json(&report_path(d))).collect::<Result<Vec<_>>>()?;
    aggregate_reports(&reports)
}

pub fn load_report(out: &Path) -> Result<ExperimentReport> {
    read_json(&report_path(out))
}

pub fn aggregate_text_summary(agg: &AggregateReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "aggregated over {} runs (seeds {:?})\n",
        agg.seeds.len(),
        agg.seeds
    ));
    s.push_str(&format!("teacher mIoU median {:.4}\n", agg.teacher_miou_median));
    s.push_str("strategy    method   median   min      max      per-seed\n");
    for c in &agg.cells {
        s.push_str(&format!(
            "{:<11} {:<8} {:<8.4} {:<8.4} {:<8.4} {:?}\n",
            c.strategy.name(),
            c.method.name(),
            c.median,
            c.min,
            c.max,
            c.per_seed.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ));
    }
    s
}
