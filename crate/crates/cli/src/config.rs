use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gaclab::data::SynthConfig;
use gaclab::demog::{ClassifierConfig, LabelMode};
use gaclab::metrics::MetricOptions;
use gaclab::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides every seed in the configuration.
pub const SEED_ENV: &str = "GACLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub mode: LabelMode,
    /// Seed of the random label mode.
    pub seed: u64,
    /// Group classifier checkpoint for the estimated mode. When unset, a
    /// classifier is trained on the training split.
    pub classifier: Option<PathBuf>,
    pub classifier_training: ClassifierConfig,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            mode: LabelMode::GroundTruth,
            seed: 0,
            classifier: None,
            classifier_training: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Held-out fold; the others are trained on.
    pub fold_index: usize,
    pub pairs_per_group: usize,
    pub metrics: MetricOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            fold_index: 0,
            pairs_per_group: 200,
            metrics: MetricOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// Per-group subject ratios applied when the dataset is synthesized.
    pub ratios: Option<Vec<f64>>,
    pub train: TrainConfig,
    pub labels: LabelConfig,
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.labels.seed = seed;
        self.labels.classifier_training.seed = seed;
    }

    /// Applies `GACLAB_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not a u64"))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => bail!("{SEED_ENV}: {e}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.ratios {
            validate_ratios(r, self.synth.nd)?;
        }
        let e = &self.evaluation;
        ensure!(e.folds >= 2, "evaluation.folds must be >= 2");
        ensure!(e.fold_index < e.folds, "fold_index {} out of {} folds", e.fold_index, e.folds);
        ensure!(
            e.pairs_per_group > 0 && e.pairs_per_group.is_multiple_of(2),
            "pairs_per_group must be a positive even number"
        );
        ensure!(
            e.metrics.reference_group < self.synth.nd,
            "reference_group {} out of {} groups",
            e.metrics.reference_group,
            self.synth.nd
        );
        ensure!(e.metrics.entropy_bins > 0 && e.metrics.correlation_bins > 0, "histogram bins must be > 0");
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn validate_ratios(ratios: &[f64], nd: usize) -> Result<()> {
    ensure!(ratios.len() == nd, "{} ratios given for {nd} groups", ratios.len());
    ensure!(
        ratios.iter().all(|r| r.is_finite() && *r >= 0.0),
        "ratios must be finite and >= 0"
    );
    ensure!(ratios.iter().any(|r| *r > 0.0), "at least one ratio must be positive");
    Ok(())
}

/// Parses `7:7:7:7` or `7,7,7,7`.
pub fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    let sep = if text.contains(':') { ':' } else { ',' };
    text.split(sep)
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad ratio '{v}' in '{text}'")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_syntax() {
        assert_eq!(parse_ratios("3.5:7:7:7").unwrap(), vec![3.5, 7.0, 7.0, 7.0]);
        assert_eq!(parse_ratios("0,7,7,7").unwrap(), vec![0.0, 7.0, 7.0, 7.0]);
        assert!(parse_ratios("a:7").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }
}
