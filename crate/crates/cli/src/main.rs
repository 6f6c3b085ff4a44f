use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{ensure, Result};
use clap::{Args, Parser, Subcommand};
use gaclab::demog::LabelMode;
use gaclab::layers::Preset;
use gaclab::trainer::Variant;
use gaclab::Execution;
use gaclab_cli::{
    cmd_eval, cmd_gradcheck, cmd_sweep, cmd_synth, cmd_train, parse_ratios, EvalRequest, ExperimentConfig, SweepAxis,
};

#[derive(Parser)]
#[command(name = "gaclab", version, about = "Group-adaptive classifier experiments on synthetic grouped data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration to stdout before running.
    #[arg(long)]
    print_config: bool,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grouped dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-group subject ratios, e.g. 0,7,7,7 or 3.5:7:7:7.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Train one model on all folds but the held-out one.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        fold_index: Option<usize>,
        #[arg(long)]
        label_mode: Option<String>,
        /// Group classifier checkpoint for --label-mode estimated.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score verification pairs and write the fairness report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label_mode: Option<String>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        reference_group: Option<usize>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
    /// One experiment per value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Space separated; ratio values use 7:7:7:7.
        #[arg(long, num_args = 1.., allow_hyphen_values = true, required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
}

fn resolve(common: &Common, apply: impl FnOnce(&mut ExperimentConfig) -> Result<()>) -> Result<(ExperimentConfig, Execution)> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply_env()?;
    apply(&mut cfg)?;
    cfg.validate()?;
    if common.print_config {
        println!("{}", cfg.to_json());
    }
    let exec = if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    Ok((cfg, exec))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            common,
            out,
            ratios,
            force,
        } => {
            let (cfg, exec) = resolve(&common, |c| {
                if let Some(r) = &ratios {
                    c.ratios = Some(parse_ratios(r)?);
                }
                Ok(())
            })?;
            let m = cmd_synth(&cfg, &out, force, exec)?;
            println!(
                "{}: {} samples, subjects per group {:?}",
                out.display(),
                m.counts.samples,
                m.counts.subjects_per_group
            );
        }
        Command::Train {
            common,
            dataset,
            out,
            variant,
            lambda,
            tau,
            epochs,
            preset,
            folds,
            fold_index,
            label_mode,
            classifier,
            force,
        } => {
            let (cfg, exec) = resolve(&common, |c| {
                if let Some(v) = &variant {
                    c.train.variant = Variant::parse(v)?;
                }
                if let Some(l) = lambda {
                    c.train.margin.lambda = l;
                }
                if let Some(t) = tau {
                    c.train.automation.tau = t;
                }
                if let Some(e) = epochs {
                    c.train.epochs = e;
                }
                if let Some(p) = &preset {
                    c.train.preset = Preset::parse(p)?;
                }
                if let Some(k) = folds {
                    c.evaluation.folds = k;
                }
                if let Some(i) = fold_index {
                    c.evaluation.fold_index = i;
                }
                if let Some(m) = &label_mode {
                    c.labels.mode = LabelMode::parse(m)?;
                }
                if classifier.is_some() {
                    c.labels.classifier = classifier.clone();
                }
                Ok(())
            })?;
            let outcome = cmd_train(&cfg, &dataset, &out, force, exec)?;
            let m = &outcome.artifacts.manifest;
            println!(
                "{}: {} steps, ce {:.4}, bias {:.4}, merged {}/{} layers",
                out.display(),
                m.steps,
                m.final_ce_loss,
                m.final_bias_loss,
                m.merged_layers.len(),
                m.adaptive_layers.len()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            pairs,
            out,
            label_mode,
            classifier,
            reference_group,
        } => {
            let (cfg, exec) = resolve(&common, |c| {
                if let Some(m) = &label_mode {
                    c.labels.mode = LabelMode::parse(m)?;
                }
                if classifier.is_some() {
                    c.labels.classifier = classifier.clone();
                }
                if let Some(g) = reference_group {
                    c.evaluation.metrics.reference_group = g;
                }
                Ok(())
            })?;
            let report = cmd_eval(
                &cfg,
                &EvalRequest {
                    checkpoint: &checkpoint,
                    dataset: &dataset,
                    pairs: &pairs,
                    out: &out,
                },
                exec,
            )?;
            for g in &report.groups {
                println!("group {}: accuracy {:?} over {} pairs", g.group, g.accuracy, g.pairs);
            }
            println!("Avg {:?} STD {:?}", report.average_accuracy, report.biasness);
        }
        Command::Gradcheck { preset, eps, seeds } => {
            let summary = cmd_gradcheck(Preset::parse(&preset)?, eps, seeds)?;
            println!(
                "{:<20} {:>8} {:>12} {:>9} {:>8} {:>6}",
                "op", "configs", "max_error", "entries", "skipped", "result"
            );
            for c in &summary.checks {
                let ok = c.max_error <= summary.tolerance;
                println!(
                    "{:<20} {:>8} {:>12.3e} {:>9} {:>8} {:>6}",
                    c.op.name(),
                    c.configs,
                    c.max_error,
                    c.checked_entries,
                    c.skipped_entries,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            println!("tolerance {:e}", summary.tolerance);
            return Ok(summary.passed());
        }
        Command::Sweep {
            common,
            axis,
            values,
            out,
            jobs,
            force,
        } => {
            ensure!(!values.is_empty(), "--values is empty");
            let axis = SweepAxis::parse(&axis)?;
            let (cfg, exec) = resolve(&common, |_| Ok(()))?;
            let rows = cmd_sweep(&cfg, axis, &values, &out, jobs, force, exec)?;
            for r in &rows {
                println!(
                    "{}={}: Avg {:?} STD {:?} merged {} subjects {:?}",
                    r.axis, r.value, r.avg, r.std, r.merged_layers, r.train_subjects_per_group
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
