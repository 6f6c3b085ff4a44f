//! Automatic selection of adaptive layers.
//!
//! Each bank's per-group rows are flattened to vectors, their pairwise
//! cosine similarities averaged over unordered pairs, and the layer merged
//! (rows replaced by their mean) when that average exceeds `tau`. Merged
//! rows keep receiving per-group updates; with `allow_resplit` the layer is
//! re-evaluated at every check.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AdaptiveLayer, KernelMaskBank, Network};
use crate::tensor::kernels::NORM_EPS;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutomationConfig {
    pub tau: f64,
    pub check_period: u64,
    pub stability_window: usize,
    pub stability_eps: f64,
    pub allow_resplit: bool,
}

impl Default for AutomationConfig {
    fn default() -> Self {
        Self {
            tau: -0.2,
            check_period: 100,
            stability_window: 5,
            stability_eps: 1e-3,
            allow_resplit: true,
        }
    }
}

impl AutomationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if self.check_period == 0 {
            return Err(Error::Config("check_period must be >= 1".into()));
        }
        if self.stability_window == 0 {
            return Err(Error::Config("stability_window must be >= 1".into()));
        }
        if !(self.stability_eps >= 0.0) {
            return Err(Error::Config("stability_eps must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub layer_id: usize,
    pub theta: Vec<Vec<f64>>,
    pub mean_similarity: f64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    KeepAdaptive,
    Merge,
}

/// Row-major flattening of each group's mask.
pub fn flatten_masks(bank: &KernelMaskBank) -> Vec<Vec<f64>> {
    flatten_rows(&bank.masks)
}

/// Rows of a bank viewed as `nd x rest`.
pub fn flatten_rows(bank: &Tensor) -> Vec<Vec<f64>> {
    (0..bank.shape()[0]).map(|g| bank.row(g).to_vec()).collect()
}

/// Cosine similarity matrix of `vectors`.
pub fn pairwise_cosine(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                Err(Error::DegenerateVector { norm, eps: NORM_EPS })
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    let n = unit.len();
    let mut theta = vec![vec![0.0; n]; n];
    for i in 0..n {
        theta[i][i] = 1.0;
        for j in i + 1..n {
            let c = crate::tensor::dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            theta[i][j] = c;
            theta[j][i] = c;
        }
    }
    Ok(theta)
}

/// Mean of `theta[i][j]` over unordered pairs `i < j`.
pub fn mean_pairwise_similarity(theta: &[Vec<f64>]) -> Result<f64> {
    let n = theta.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean pairwise similarity needs at least 2 groups, got {n}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += theta[i][j];
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Similarity report for one bank, or `None` when it cannot be evaluated.
///
/// A bank whose rows are all identical (including all-zero attention logits
/// at initialization) reports similarity 1. A bank with a zero-norm row that
/// differs from the others is skipped for this check.
pub fn similarity_report(layer_id: usize, bank: &Tensor, step: u64) -> Option<SimilarityReport> {
    let rows = flatten_rows(bank);
    if rows.len() < 2 {
        return None;
    }
    let theta = match pairwise_cosine(&rows) {
        Ok(theta) => theta,
        Err(_) if rows.iter().all(|r| r == &rows[0]) => vec![vec![1.0; rows.len()]; rows.len()],
        Err(_) => return None,
    };
    let mean_similarity = mean_pairwise_similarity(&theta).ok()?;
    Some(SimilarityReport {
        layer_id,
        theta,
        mean_similarity,
        step,
    })
}

pub fn adapt_decision(report: &SimilarityReport, config: &AutomationConfig) -> Decision {
    if report.mean_similarity > config.tau {
        Decision::Merge
    } else {
        Decision::KeepAdaptive
    }
}

/// Replaces every row of the bank by the mean over the group dimension.
pub fn merge_rows(bank: &mut Tensor) {
    let nd = bank.shape()[0];
    let width = bank.numel() / nd;
    let mut mean = vec![0.0; width];
    for g in 0..nd {
        for (m, v) in mean.iter_mut().zip(bank.row(g)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nd as f64);
    for g in 0..nd {
        bank.row_mut(g).copy_from_slice(&mean);
    }
}

/// Periodic similarity checks over a network's banks.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: AutomationConfig,
    /// Consecutive checks with `|delta mean similarity| < stability_eps`, per layer.
    stable_checks: Vec<usize>,
    checks_run: usize,
}

impl Monitor {
    pub fn new(config: AutomationConfig, layers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            stable_checks: vec![0; layers],
            checks_run: 0,
        })
    }

    pub fn config(&self) -> &AutomationConfig {
        &self.config
    }

    pub fn is_due(&self, step: u64) -> bool {
        step > 0 && step.is_multiple_of(self.config.check_period)
    }

    /// Evaluates every bank, applies merge decisions and returns the reports.
    pub fn check(&mut self, network: &mut Network, step: u64) -> Vec<SimilarityReport> {
        let (params, layers) = network.adaptive_parts_mut();
        self.check_layers(params, layers, step)
    }

    pub fn check_layers(
        &mut self,
        params: &mut ParamStore,
        layers: &mut [AdaptiveLayer],
        step: u64,
    ) -> Vec<SimilarityReport> {
        self.checks_run += 1;
        let mut reports = Vec::new();
        for (id, layer) in layers.iter_mut().enumerate() {
            let bank = params.value_mut(layer.param);
            let Some(report) = similarity_report(id, bank, step) else {
                continue;
            };
            let delta = layer
                .state
                .similarity_history
                .last()
                .map(|&(_, prev)| (report.mean_similarity - prev).abs());
            self.stable_checks[id] = match delta {
                Some(d) if d < self.config.stability_eps => self.stable_checks[id] + 1,
                _ => 0,
            };
            layer.state.record(step, report.mean_similarity);

            let frozen = layer.state.shared_flag && !self.config.allow_resplit;
            match adapt_decision(&report, &self.config) {
                Decision::Merge => {
                    merge_rows(bank);
                    layer.state.shared_flag = true;
                }
                Decision::KeepAdaptive if frozen => merge_rows(bank),
                Decision::KeepAdaptive => layer.state.shared_flag = false,
            }
            reports.push(report);
        }
        reports
    }

    /// True once every multi-group layer has been stable for
    /// `stability_window` consecutive checks.
    pub fn converged(&self, layers: &[AdaptiveLayer], nd: usize) -> bool {
        if nd < 2 || layers.is_empty() {
            return true;
        }
        self.checks_run > 0 && self.stable_checks.iter().all(|&c| c + 1 >= self.config.stability_window)
    }
}

/// Re-applies the merge rule to a recorded sequence of bank snapshots
/// without feeding merges back into the snapshots. `snapshots[t][l]` is
/// layer `l`'s bank at check `t`. Returns the layers merged after the last
/// check.
pub fn replay_merged_layers(snapshots: &[Vec<Tensor>], config: &AutomationConfig) -> BTreeSet<usize> {
    let mut shared: Vec<bool> = snapshots.first().map_or(Vec::new(), |s| vec![false; s.len()]);
    for (t, snapshot) in snapshots.iter().enumerate() {
        for (l, bank) in snapshot.iter().enumerate() {
            let Some(report) = similarity_report(l, bank, t as u64) else { continue };
            shared[l] = match adapt_decision(&report, config) {
                Decision::Merge => true,
                Decision::KeepAdaptive => shared[l] && !config.allow_resplit,
            };
        }
    }
    shared
        .iter()
        .enumerate()
        .filter_map(|(l, &s)| s.then_some(l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn report(mean: f64) -> SimilarityReport {
        SimilarityReport {
            layer_id: 0,
            theta: vec![],
            mean_similarity: mean,
            step: 1,
        }
    }

    #[test]
    fn flatten_is_row_major() {
        let bank = KernelMaskBank::from_tensor(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        assert_eq!(flatten_masks(&bank), vec![vec![1., 2., 3., 4.]]);
        let ones = KernelMaskBank::new(3, 2, 3, 3).unwrap();
        let v = flatten_masks(&ones);
        assert!(v.iter().all(|r| r == &v[0] && r.len() == 18));
    }

    #[test]
    fn cosine_examples() {
        let theta = pairwise_cosine(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        assert_eq!(theta[0][1], 0.0);
        let theta = pairwise_cosine(&[vec![1., 2.], vec![3., 6.]]).unwrap();
        assert_abs_diff_eq!(theta[0][1], 1.0, epsilon = 1e-15);

        let theta = pairwise_cosine(&[vec![1., 0.], vec![0., 1.], vec![1., 1.]]).unwrap();
        assert_abs_diff_eq!(theta[0][1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theta[0][2], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(theta[1][2], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        for i in 0..3 {
            assert_eq!(theta[i][i], 1.0);
        }
        assert_abs_diff_eq!(mean_pairwise_similarity(&theta).unwrap(), 0.4714, epsilon = 1e-4);

        assert!(matches!(
            pairwise_cosine(&[vec![0., 0.], vec![1., 0.]]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn mean_similarity_examples() {
        assert_eq!(mean_pairwise_similarity(&vec![vec![1.0; 4]; 4]).unwrap(), 1.0);
        assert_eq!(mean_pairwise_similarity(&[vec![1., -0.3], vec![-0.3, 1.]]).unwrap(), -0.3);
        assert!(mean_pairwise_similarity(&[vec![1.0]]).is_err());
    }

    #[test]
    fn decisions_follow_threshold() {
        let cfg = AutomationConfig::default();
        assert_eq!(adapt_decision(&report(1.0), &cfg), Decision::Merge);
        assert_eq!(adapt_decision(&report(-0.5), &cfg), Decision::KeepAdaptive);
    }

    #[test]
    fn merge_averages_rows_and_is_idempotent() {
        let mut bank = Tensor::new(vec![2, 2], vec![1., 1., 3., 3.]).unwrap();
        merge_rows(&mut bank);
        assert_eq!(bank.data(), &[2., 2., 2., 2.]);
        let once = bank.clone();
        merge_rows(&mut bank);
        assert_eq!(bank, once);

        let mut same = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let orig = same.clone();
        merge_rows(&mut same);
        assert_eq!(same, orig);
    }

    #[test]
    fn all_zero_rows_count_as_identical() {
        let r = similarity_report(0, &Tensor::zeros(&[4, 8]), 5).unwrap();
        assert_eq!(r.mean_similarity, 1.0);
        let mut mixed = Tensor::zeros(&[2, 2]);
        mixed.row_mut(1)[0] = 1.0;
        assert!(similarity_report(0, &mixed, 5).is_none());
        assert!(similarity_report(0, &Tensor::ones(&[1, 3]), 5).is_none());
    }

    #[test]
    fn replay_threshold_sets() {
        // Two layers: one with similar rows, one with opposed rows.
        let similar = Tensor::new(vec![2, 2], vec![1., 0.1, 1., 0.]).unwrap();
        let opposed = Tensor::new(vec![2, 2], vec![1., 0., -1., 0.]).unwrap();
        let snaps = vec![vec![similar, opposed]];
        let cfg = AutomationConfig::default();
        assert_eq!(replay_merged_layers(&snaps, &cfg), BTreeSet::from([0]));
    }
}
