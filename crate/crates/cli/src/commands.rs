use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gaclab::checks::{gradcheck_suite, CheckedOp, OpCheck};
use gaclab::data::{
    generate_pairs, generate_synthetic_with, load_dataset, make_folds, ratio_subsample, read_pairs_csv, save_dataset,
    split_fold, write_pairs_csv, Dataset, Manifest, Pair,
};
use gaclab::demog::{train_group_classifier, LabelMode, LabelProvider};
use gaclab::layers::Preset;
use gaclab::metrics::{fairness_report, write_report, FairnessReport, ReportMetadata};
use gaclab::tensor::checkpoint::Checkpoint;
use gaclab::trainer::{extract_embeddings, train_run, EvalManifest, RunArtifacts, CHECKPOINT_DIR, EVAL_MANIFEST};
use gaclab::Execution;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{parse_ratios, validate_ratios, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

/// Refuses to reuse a non-empty directory unless `force` is set, in which
/// case the directory is cleared.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            ensure!(force, "output directory {} is not empty (use --force)", dir.display());
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_synth(cfg: &ExperimentConfig, out_dir: &Path, force: bool, exec: Execution) -> Result<Manifest> {
    cfg.validate()?;
    prepare_out_dir(out_dir, force)?;
    let mut dataset = generate_synthetic_with(&cfg.synth, exec)?;
    if let Some(ratios) = &cfg.ratios {
        dataset = ratio_subsample(&dataset, ratios, cfg.synth.seed)?;
    }
    let manifest = Manifest::describe(&dataset, Some(cfg.synth.clone()), cfg.ratios.clone());
    save_dataset(out_dir, &dataset, &manifest)?;
    info!(
        "wrote {} samples of {} subjects to {}",
        manifest.counts.samples,
        manifest.counts.subjects,
        out_dir.display()
    );
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub folds: usize,
    pub fold_index: usize,
    pub seed: u64,
    pub train_ratios: Option<Vec<f64>>,
    pub train_identities: BTreeSet<usize>,
    pub test_identities: BTreeSet<usize>,
    /// Training subjects per group, after any ratio subsampling.
    pub train_subjects_per_group: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifacts: RunArtifacts,
    pub split: SplitRecord,
    pub pairs_path: PathBuf,
}

/// Rewrites pair indices from positions in `subset` to positions in `full`.
fn remap_pairs(pairs: &[Pair], subset: &Dataset, full: &Dataset) -> Vec<Pair> {
    let pos: HashMap<usize, usize> = full.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    pairs
        .iter()
        .map(|p| Pair {
            idx_a: pos[&subset.samples[p.idx_a].id],
            idx_b: pos[&subset.samples[p.idx_b].id],
            ..*p
        })
        .collect()
}

/// Trains on every fold but `evaluation.fold_index` and writes the held-out
/// verification pairs next to the run. `train_ratios` subsamples the
/// training split only.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    train_ratios: Option<&[f64]>,
    force: bool,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (dataset, _) = load_dataset(dataset_dir)?;
    if let Some(r) = train_ratios {
        validate_ratios(r, dataset.nd)?;
    }
    prepare_out_dir(out_dir, force)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;

    let ev = &cfg.evaluation;
    let folds = make_folds(&dataset, ev.folds, cfg.train.seed)?;
    let (mut train, test) = split_fold(&dataset, &folds, ev.fold_index)?;
    if let Some(r) = train_ratios {
        train = ratio_subsample(&train, r, cfg.train.seed)?;
    }

    let provider = match (cfg.labels.mode, &cfg.labels.classifier) {
        (LabelMode::Estimated, None) => {
            let (clf, report) = train_group_classifier(&train, &cfg.labels.classifier_training, exec)?;
            info!("group classifier held-out accuracy {:.4}", report.mean_accuracy);
            let dir = out_dir.join(CLASSIFIER_DIR);
            clf.save(&dir)?;
            write_json(&dir.join("report.json"), &report)?;
            LabelProvider::estimated(clf)
        }
        (mode, clf) => LabelProvider::from_mode(mode, dataset.nd, cfg.labels.seed, clf.as_deref())?,
    };

    let artifacts = train_run(&cfg.train, &train, &provider, out_dir, exec)?;

    let pairs = generate_pairs(&test, ev.pairs_per_group, cfg.train.seed)?;
    let pairs_path = out_dir.join(PAIRS_FILE);
    write_pairs_csv(&pairs_path, &remap_pairs(&pairs, &test, &dataset))?;

    let split = SplitRecord {
        folds: ev.folds,
        fold_index: ev.fold_index,
        seed: cfg.train.seed,
        train_ratios: train_ratios.map(<[f64]>::to_vec),
        train_identities: train.identities(),
        test_identities: test.identities(),
        train_subjects_per_group: train.subjects_by_group().iter().map(Vec::len).collect(),
    };
    write_json(&out_dir.join(SPLIT_FILE), &split)?;
    Ok(TrainOutcome {
        artifacts,
        split,
        pairs_path,
    })
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    force: bool,
    exec: Execution,
) -> Result<TrainOutcome> {
    train_experiment(cfg, dataset_dir, out_dir, None, force, exec)
}

#[derive(Debug, Clone)]
pub struct EvalRequest<'a> {
    /// A run directory or a checkpoint directory.
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub pairs: &'a Path,
    pub out: &'a Path,
}

fn resolve_checkpoint(path: &Path) -> (PathBuf, Option<PathBuf>) {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        (nested, Some(path.to_path_buf()))
    } else {
        let run = path.parent().filter(|p| p.join(EVAL_MANIFEST).is_file()).map(Path::to_path_buf);
        (path.to_path_buf(), run)
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, req: &EvalRequest<'_>, exec: Execution) -> Result<FairnessReport> {
    cfg.validate()?;
    ensure!(req.pairs.is_file(), "pairs file {} does not exist", req.pairs.display());
    let (ckpt_dir, run_dir) = resolve_checkpoint(req.checkpoint);
    let checkpoint = Checkpoint::load(&ckpt_dir)?;
    let (dataset, _) = load_dataset(req.dataset)?;
    let pairs = read_pairs_csv(req.pairs)?;
    for p in &pairs {
        ensure!(
            p.idx_a < dataset.len() && p.idx_b < dataset.len(),
            "pair ({}, {}) indexes past the {} samples of {}",
            p.idx_a,
            p.idx_b,
            dataset.len(),
            req.dataset.display()
        );
    }

    // Only subjects that appear in the pairs are embedded.
    let keep: BTreeSet<usize> = pairs
        .iter()
        .flat_map(|p| [dataset.samples[p.idx_a].identity, dataset.samples[p.idx_b].identity])
        .collect();
    let subset = dataset.filter_identities(|j| keep.contains(&j));
    let pos: HashMap<usize, usize> = subset.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let pairs: Vec<Pair> = pairs
        .iter()
        .map(|p| Pair {
            idx_a: pos[&dataset.samples[p.idx_a].id],
            idx_b: pos[&dataset.samples[p.idx_b].id],
            ..*p
        })
        .collect();

    let manifest: Option<EvalManifest> = match &run_dir {
        Some(dir) => {
            let text = fs::read_to_string(dir.join(EVAL_MANIFEST))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let classifier = cfg.labels.classifier.clone().or_else(|| {
        run_dir
            .as_ref()
            .map(|d| d.join(CLASSIFIER_DIR))
            .filter(|d| d.is_dir())
    });
    let provider = LabelProvider::from_mode(cfg.labels.mode, dataset.nd, cfg.labels.seed, classifier.as_deref())?;
    let batch = extract_embeddings(&checkpoint, &subset, &provider, exec)?;

    let metadata = ReportMetadata {
        run_id: manifest.as_ref().map_or_else(|| ckpt_dir.display().to_string(), |m| m.run_id.clone()),
        tau: manifest.as_ref().map_or(cfg.train.automation.tau, |m| m.tau),
        lambda: manifest.as_ref().map_or(cfg.train.margin.lambda, |m| m.lambda),
        label_mode: cfg.labels.mode.name().to_string(),
    };
    // Metrics group subjects by their true group; routing used the provider.
    let groups: Vec<usize> = subset.samples.iter().map(|s| s.group).collect();
    let report = fairness_report(
        &batch.embeddings,
        &batch.identities,
        &groups,
        dataset.nd,
        &pairs,
        metadata,
        &cfg.evaluation.metrics,
        exec,
    )?;
    fs::create_dir_all(req.out).with_context(|| format!("creating {}", req.out.display()))?;
    write_report(req.out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_error <= self.tolerance)
    }
}

/// The tolerance equals `eps`.
pub fn cmd_gradcheck(preset: Preset, eps: f64, seeds: u64) -> Result<GradcheckSummary> {
    let checks = gradcheck_suite(&CheckedOp::ALL, seeds, eps, preset)?;
    Ok(GradcheckSummary {
        eps,
        tolerance: eps,
        checks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    Lambda,
    Ratio,
    Depth,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "tau" => Self::Tau,
            "lambda" => Self::Lambda,
            "ratio" => Self::Ratio,
            "depth" => Self::Depth,
            other => bail!("unknown sweep axis '{other}' (expected tau, lambda, ratio or depth)"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::Lambda => "lambda",
            Self::Ratio => "ratio",
            Self::Depth => "depth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub avg: Option<f64>,
    pub std: Option<f64>,
    pub merged_layers: usize,
    pub adaptive_layers: usize,
    pub train_subjects_per_group: Vec<usize>,
    pub run_dir: String,
}

/// Applies one axis value to a copy of `base`; returns the training ratios
/// for the ratio axis.
fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<(ExperimentConfig, Option<Vec<f64>>)> {
    let mut cfg = base.clone();
    let mut ratios = None;
    match axis {
        SweepAxis::Tau => cfg.train.automation.tau = value.parse().with_context(|| format!("bad tau '{value}'"))?,
        SweepAxis::Lambda => cfg.train.margin.lambda = value.parse().with_context(|| format!("bad lambda '{value}'"))?,
        SweepAxis::Ratio => ratios = Some(parse_ratios(value)?),
        SweepAxis::Depth => cfg.train.preset = Preset::parse(value)?,
    }
    cfg.validate()?;
    Ok((cfg, ratios))
}

fn run_dir_name(index: usize, axis: SweepAxis, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:02}-{}-{clean}", axis.name())
}

/// One seeded experiment per value, each in its own directory under
/// `out_dir`, sharing one synthesized dataset.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
    jobs: usize,
    force: bool,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    ensure!(jobs >= 1, "--jobs must be >= 1");
    cfg.validate()?;
    let plans: Vec<(ExperimentConfig, Option<Vec<f64>>)> =
        values.iter().map(|v| apply_axis(cfg, axis, v)).collect::<Result<_>>()?;

    prepare_out_dir(out_dir, force)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    let dataset_dir = out_dir.join("dataset");
    cmd_synth(cfg, &dataset_dir, false, exec)?;

    let run_one = |i: usize| -> Result<SweepRow> {
        let (run_cfg, ratios) = &plans[i];
        let value = &values[i];
        let dir = out_dir.join(run_dir_name(i, axis, value));
        info!("sweep {}={value} -> {}", axis.name(), dir.display());
        let outcome = train_experiment(run_cfg, &dataset_dir, &dir, ratios.as_deref(), false, exec)?;
        let eval_dir = dir.join("eval");
        let report = cmd_eval(
            run_cfg,
            &EvalRequest {
                checkpoint: &dir,
                dataset: &dataset_dir,
                pairs: &outcome.pairs_path,
                out: &eval_dir,
            },
            exec,
        )?;
        let m = &outcome.artifacts.manifest;
        Ok(SweepRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            avg: report.average_accuracy,
            std: report.biasness,
            merged_layers: m.merged_layers.len(),
            adaptive_layers: m.adaptive_layers.len(),
            train_subjects_per_group: outcome.split.train_subjects_per_group.clone(),
            run_dir: dir.file_name().unwrap().to_string_lossy().into_owned(),
        })
    };

    let rows: Vec<SweepRow> = run_parallel(values.len(), jobs, run_one)?;
    write_sweep_summary(&out_dir.join(SWEEP_SUMMARY), &rows, cfg.synth.nd)?;
    Ok(rows)
}

#[cfg(feature = "parallel")]
fn run_parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs > 1 {
        log::warn!("built without the parallel feature; running sweep sequentially");
    }
    (0..n).map(f).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_sweep_summary(path: &Path, rows: &[SweepRow], nd: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> = ["axis", "value", "avg", "std", "merged_layers", "adaptive_layers"]
        .map(String::from)
        .to_vec();
    header.extend((0..nd).map(|g| format!("train_subjects_g{g}")));
    header.push("run_dir".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.axis.clone(),
            r.value.clone(),
            fmt_opt(r.avg),
            fmt_opt(r.std),
            r.merged_layers.to_string(),
            r.adaptive_layers.to_string(),
        ];
        rec.extend((0..nd).map(|g| r.train_subjects_per_group.get(g).copied().unwrap_or(0).to_string()));
        rec.push(r.run_dir.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

