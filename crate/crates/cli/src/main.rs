//! Pipeline runner for data-free segmentation distillation experiments.
//!
//! Stages read and write documented artifacts under one output directory:
//! corpora, checkpoints, selections, metric logs and reports. Exit codes:
//! 0 success, 2 precondition violation, 3 I/O failure, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dfss_core::distill::DistillMethod;
use dfss_core::error::Error;
use dfss_core::experiment::{
    aggregate_from_dirs, aggregate_text_summary, ensure_stamp, run_all, stage_distill,
    stage_evaluate, stage_gen_corpus, stage_sample, stage_train_teacher, text_summary,
    ExperimentConfig,
};
use dfss_core::sampler::Strategy;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Ads,
    Random,
    Confidence,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Ads => Strategy::Ads,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Confidence => Strategy::Confidence,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Vanilla,
    Wdd,
    Wdpd,
}

impl From<MethodArg> for DistillMethod {
    fn from(m: MethodArg) -> DistillMethod {
        match m {
            MethodArg::Vanilla => DistillMethod::Vanilla,
            MethodArg::Wdd => DistillMethod::Wdd,
            MethodArg::Wdpd => DistillMethod::Wdpd,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dfss",
    about = "Data-free segmentation distillation: synthetic benchmark pipeline",
    version
)]
struct Cli {
    /// Experiment config file (TOML); defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the original train/test corpora and the open-world corpus.
    GenCorpus,
    /// Train the teacher on the original corpus and evaluate it.
    TrainTeacher,
    /// Select open-world samples with one strategy.
    Sample {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Selection size; defaults to the config's value.
        #[arg(long)]
        epsilon: Option<usize>,
    },
    /// Distill a student from an existing selection.
    Distill {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long = "distill", value_enum)]
        method: MethodArg,
    },
    /// Evaluate a checkpoint on the held-out original test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate report.json files from several run directories.
    Report {
        /// Run directories (each containing a report.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run every stage and emit the full experiment report.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_toml_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::GenCorpus => {
            stage_gen_corpus(&cfg, out)?;
            println!(
                "wrote corpora ({} train / {} test / {} open-world) under {}",
                cfg.corpus.n_original_train,
                cfg.corpus.n_original_test,
                cfg.corpus.n_openworld,
                out.join("corpus").display()
            );
        }
        Cmd::TrainTeacher => {
            let report = stage_train_teacher(&cfg, out)?;
            println!("teacher mIoU {:.4} -> {}", report.miou.mean_iou, out.join("teacher.ckpt").display());
        }
        Cmd::Sample { strategy, epsilon } => {
            let eps = epsilon.unwrap_or(cfg.distill.epsilon);
            let strategy: Strategy = strategy.into();
            let sel = stage_sample(&cfg, out, strategy, eps)?;
            println!(
                "selected {} / {} samples with {}",
                sel.ids.len(),
                cfg.corpus.n_openworld,
                strategy.name()
            );
        }
        Cmd::Distill { strategy, method } => {
            let strategy: Strategy = strategy.into();
            let method: DistillMethod = method.into();
            let report = stage_distill(&cfg, out, strategy, method)?;
            println!(
                "student ({} / {}) mIoU {:.4}",
                strategy.name(),
                method.name(),
                report.miou.mean_iou
            );
        }
        Cmd::Evaluate { checkpoint } => {
            let report = stage_evaluate(&cfg, out, &checkpoint)?;
            println!("{} mIoU {:.4}", checkpoint.display(), report.miou.mean_iou);
        }
        Cmd::Report { runs } => {
            // Aggregation reads existing artifacts; no stamp needed.
            let agg = aggregate_from_dirs(&runs)?;
            let text = aggregate_text_summary(&agg);
            print!("{text}");
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join("aggregate.json");
            let json = serde_json_string(&agg)?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            std::fs::write(out.join("aggregate.txt"), text)
                .map_err(|e| Error::io(&out.join("aggregate.txt"), e))?;
        }
        Cmd::RunAll => {
            ensure_stamp(&cfg, out)?;
            let report = run_all(&cfg, out)?;
            print!("{}", text_summary(&report, None));
            println!("report: {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map_err(|e| Error::format(format!("serialization: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
