//! Fairness audit: per-group verification accuracy, biasness, ratio
//! distributions with relative entropy, and correlation histograms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, map_slice, Execution};
use crate::tensor::{dot, Tensor};

pub const REPORT_JSON: &str = "fairness_report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RATIO_HISTOGRAM_CSV: &str = "ratio_histogram.csv";
pub const CORRELATION_HISTOGRAM_CSV: &str = "correlation_histogram.csv";

/// Additive smoothing applied to every histogram bin before normalizing.
pub const HISTOGRAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub accuracy: f64,
    /// Scores strictly above this are classified genuine.
    pub threshold: f64,
    pub pairs: usize,
}

/// Best accuracy over thresholds at every midpoint of the sorted scores
/// (plus one below and one above all scores).
pub fn best_threshold_accuracy(scores: &[(f64, bool)]) -> GroupAccuracy {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let genuine_total = sorted.iter().filter(|s| s.1).count();
    let below = sorted.first().map_or(0.0, |s| s.0 - 1.0);
    let (mut best, mut threshold) = (genuine_total, below);
    let (mut impostors_below, mut genuine_below) = (0, 0);
    for i in 0..n {
        if sorted[i].1 {
            genuine_below += 1;
        } else {
            impostors_below += 1;
        }
        if i + 1 < n && sorted[i + 1].0 == sorted[i].0 {
            continue;
        }
        let correct = impostors_below + genuine_total - genuine_below;
        if correct > best {
            best = correct;
            threshold = if i + 1 < n {
                0.5 * (sorted[i].0 + sorted[i + 1].0)
            } else {
                sorted[i].0 + 1.0
            };
        }
    }
    GroupAccuracy {
        accuracy: if n == 0 { f64::NAN } else { best as f64 / n as f64 },
        threshold,
        pairs: n,
    }
}

/// Per-group accuracy of cosine-similarity verification on `pairs`.
/// `embeddings` rows are L2-normalized; groups without pairs are omitted.
pub fn verification_accuracy(
    pairs: &[Pair],
    embeddings: &Tensor,
    nd: usize,
    exec: Execution,
) -> Result<BTreeMap<usize, GroupAccuracy>> {
    let rows = embeddings.shape()[0];
    if let Some(bad) = pairs.iter().find(|p| p.idx_a >= rows || p.idx_b >= rows) {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) references a sample outside 0..{rows}",
            bad.idx_a, bad.idx_b
        )));
    }
    if let Some(bad) = pairs.iter().find(|p| p.group >= nd) {
        return Err(Error::GroupOutOfRange { group: bad.group, nd });
    }
    let scores = map_slice(pairs, exec, |p| dot(embeddings.row(p.idx_a), embeddings.row(p.idx_b)));
    let mut by_group: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(scores) {
        by_group.entry(p.group).or_default().push((s, p.genuine));
    }
    for g in (0..nd).filter(|g| !by_group.contains_key(g)) {
        warn!("group {g} has no verification pairs; omitted");
    }
    Ok(by_group
        .into_iter()
        .map(|(g, s)| (g, best_threshold_accuracy(&s)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biasness {
    /// Population standard deviation of the accuracies.
    pub std: f64,
    pub average: f64,
}

pub fn biasness(accuracies: &[f64]) -> Result<Biasness> {
    if accuracies.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "biasness needs at least two groups, got {}",
            accuracies.len()
        )));
    }
    let n = accuracies.len() as f64;
    let average = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - average) * (a - average)).sum::<f64>() / n;
    Ok(Biasness {
        std: var.sqrt(),
        average,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRatio {
    pub identity: usize,
    pub ratio: f64,
}

/// Per subject: minimum distance from any of its embeddings to another
/// subject's embedding in the same group, over the maximum distance between
/// two of its own embeddings. Subjects with one image, coincident images or
/// no other subject in the group are skipped.
pub fn ratio_distribution(
    embeddings: &Tensor,
    identities: &[usize],
    groups: &[usize],
    exec: Execution,
) -> BTreeMap<usize, Vec<SubjectRatio>> {
    let mut members: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (row, (&j, &g)) in identities.iter().zip(groups).enumerate() {
        members.entry(g).or_default().entry(j).or_default().push(row);
    }
    let mut out = BTreeMap::new();
    for (g, subjects) in members {
        let list: Vec<(usize, &Vec<usize>)> = subjects.iter().map(|(j, r)| (*j, r)).collect();
        let ratios = map_indexed(list.len(), exec, |k| {
            let (j, rows) = list[k];
            if rows.len() < 2 {
                return None;
            }
            let mut intra: f64 = 0.0;
            for (a, &ra) in rows.iter().enumerate() {
                for &rb in &rows[a + 1..] {
                    intra = intra.max(euclid(embeddings.row(ra), embeddings.row(rb)));
                }
            }
            if intra == 0.0 {
                warn!("subject {j} has coincident embeddings; excluded from ratios");
                return None;
            }
            let mut inter = f64::INFINITY;
            for (other, orows) in &list {
                if *other == j {
                    continue;
                }
                for &ra in rows.iter() {
                    for &rb in orows.iter() {
                        inter = inter.min(euclid(embeddings.row(ra), embeddings.row(rb)));
                    }
                }
            }
            inter.is_finite().then(|| SubjectRatio {
                identity: j,
                ratio: inter / intra,
            })
        });
        out.insert(g, ratios.into_iter().flatten().collect());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Population standard deviation.
    pub stad: f64,
    pub count: usize,
}

pub fn summary(values: &[f64]) -> SummaryStats {
    let n = values.len();
    if n == 0 {
        return SummaryStats {
            mean: f64::NAN,
            stad: f64::NAN,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    SummaryStats {
        mean,
        stad: var.sqrt(),
        count: n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for &v in values {
            let k = if width > 0.0 {
                (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        Self {
            edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Smoothed, normalized bin probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        let raw: Vec<f64> = self.counts.iter().map(|&c| c as f64 / n + HISTOGRAM_EPS).collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|p| p / z).collect()
    }
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// `KL(group || reference)` between `bins`-bin histograms over the pooled
/// range of all non-empty lists. Empty lists are omitted.
pub fn relative_entropy(
    sets: &BTreeMap<usize, Vec<f64>>,
    reference_group: usize,
    bins: usize,
) -> Result<BTreeMap<usize, f64>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let reference = sets
        .get(&reference_group)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("reference group {reference_group} has no values")))?;
    let pooled = sets.values().flatten();
    let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
    let q = Histogram::new(reference, lo, hi, bins).probabilities();
    let mut out = BTreeMap::new();
    for (&g, values) in sets {
        if values.is_empty() {
            warn!("group {g} has no ratios; omitted from relative entropy");
            continue;
        }
        let p = Histogram::new(values, lo, hi, bins).probabilities();
        out.insert(g, if g == reference_group { 0.0 } else { kl_divergence(&p, &q) });
    }
    Ok(out)
}

/// Pearson correlation across dimensions. A zero-variance operand gives 1
/// when both vectors are equal and 0 otherwise.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Histogram over `[-1, 1]` of the correlation between the first
/// embeddings of every pair of distinct subjects (at most `max_subjects`,
/// in order of first appearance).
pub fn correlation_histogram(
    embeddings: &Tensor,
    identities: &[usize],
    max_subjects: usize,
    bins: usize,
) -> Result<Histogram> {
    let mut seen = std::collections::BTreeSet::new();
    let firsts: Vec<usize> = identities
        .iter()
        .enumerate()
        .filter(|(_, j)| seen.insert(**j))
        .map(|(row, _)| row)
        .take(max_subjects)
        .collect();
    if firsts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation histogram needs at least two subjects, got {}",
            firsts.len()
        )));
    }
    let mut values = Vec::with_capacity(firsts.len() * (firsts.len() - 1) / 2);
    for (a, &ra) in firsts.iter().enumerate() {
        for &rb in &firsts[a + 1..] {
            values.push(pearson(embeddings.row(ra), embeddings.row(rb)));
        }
    }
    Ok(Histogram::new(&values, -1.0, 1.0, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub reference_group: usize,
    pub entropy_bins: usize,
    pub correlation_bins: usize,
    pub max_subjects: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            reference_group: 0,
            entropy_bins: 64,
            correlation_bins: 20,
            max_subjects: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub run_id: String,
    pub tau: f64,
    pub lambda: f64,
    pub label_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub pairs: usize,
    pub ratio: SummaryStats,
    pub relative_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub metadata: ReportMetadata,
    pub groups: Vec<GroupReport>,
    #[serde(rename = "Avg")]
    pub average_accuracy: Option<f64>,
    #[serde(rename = "STD")]
    pub biasness: Option<f64>,
    pub reference_group: usize,
    pub entropy_bins: usize,
    pub ratio_histograms: BTreeMap<usize, Histogram>,
    pub correlation_histograms: BTreeMap<usize, Histogram>,
}

/// Every metric for normalized `embeddings` with ground-truth `identities`
/// and `groups` per row.
#[allow(clippy::too_many_arguments)]
pub fn fairness_report(
    embeddings: &Tensor,
    identities: &[usize],
    groups: &[usize],
    nd: usize,
    pairs: &[Pair],
    metadata: ReportMetadata,
    options: &MetricOptions,
    exec: Execution,
) -> Result<FairnessReport> {
    let accuracy = verification_accuracy(pairs, embeddings, nd, exec)?;
    let accs: Vec<f64> = accuracy.values().map(|a| a.accuracy).collect();
    let bias = match biasness(&accs) {
        Ok(b) => Some(b),
        Err(e) => {
            warn!("{e}");
            None
        }
    };

    let ratios = ratio_distribution(embeddings, identities, groups, exec);
    let ratio_values: BTreeMap<usize, Vec<f64>> = ratios
        .iter()
        .map(|(g, r)| (*g, r.iter().map(|s| s.ratio).collect()))
        .collect();
    let entropy = match relative_entropy(&ratio_values, options.reference_group, options.entropy_bins) {
        Ok(e) => e,
        Err(e) => {
            warn!("relative entropy skipped: {e}");
            BTreeMap::new()
        }
    };
    let pooled: Vec<f64> = ratio_values.values().flatten().copied().collect();
    let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio_histograms = ratio_values
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(g, v)| (*g, Histogram::new(v, lo, hi, options.entropy_bins)))
        .collect();

    let mut correlation_histograms = BTreeMap::new();
    for g in 0..nd {
        let rows: Vec<usize> = (0..groups.len()).filter(|&r| groups[r] == g).collect();
        if rows.len() < 2 {
            continue;
        }
        let d = embeddings.shape()[1];
        let sub = Tensor::new(
            vec![rows.len(), d],
            rows.iter().flat_map(|&r| embeddings.row(r).iter().copied()).collect(),
        )?;
        let ids: Vec<usize> = rows.iter().map(|&r| identities[r]).collect();
        if let Ok(h) = correlation_histogram(&sub, &ids, options.max_subjects, options.correlation_bins) {
            correlation_histograms.insert(g, h);
        }
    }

    let group_reports = (0..nd)
        .map(|g| GroupReport {
            group: g,
            accuracy: accuracy.get(&g).map(|a| a.accuracy),
            threshold: accuracy.get(&g).map(|a| a.threshold),
            pairs: accuracy.get(&g).map_or(0, |a| a.pairs),
            ratio: summary(ratio_values.get(&g).map_or(&[][..], |v| v.as_slice())),
            relative_entropy: entropy.get(&g).copied(),
        })
        .collect();
    Ok(FairnessReport {
        metadata,
        groups: group_reports,
        average_accuracy: bias.map(|b| b.average),
        biasness: bias.map(|b| b.std),
        reference_group: options.reference_group,
        entropy_bins: options.entropy_bins,
        ratio_histograms,
        correlation_histograms,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_histograms(path: &Path, hists: &BTreeMap<usize, Histogram>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["group", "bin_lo", "bin_hi", "count"])
        .map_err(|e| Error::io(path, e.into()))?;
    for (g, h) in hists {
        for (k, c) in h.counts.iter().enumerate() {
            w.write_record([g.to_string(), h.edges[k].to_string(), h.edges[k + 1].to_string(), c.to_string()])
                .map_err(|e| Error::io(path, e.into()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the JSON report, the per-group CSV and both histogram CSVs.
pub fn write_report(dir: &Path, report: &FairnessReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;

    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    w.write_record([
        "group",
        "accuracy",
        "threshold",
        "pairs",
        "ratio_mean",
        "ratio_stad",
        "ratio_count",
        "relative_entropy",
    ])
    .map_err(|e| Error::io(&csv_path, e.into()))?;
    for g in &report.groups {
        w.write_record([
            g.group.to_string(),
            opt(g.accuracy),
            opt(g.threshold),
            g.pairs.to_string(),
            g.ratio.mean.to_string(),
            g.ratio.stad.to_string(),
            g.ratio.count.to_string(),
            opt(g.relative_entropy),
        ])
        .map_err(|e| Error::io(&csv_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_histograms(&dir.join(RATIO_HISTOGRAM_CSV), &report.ratio_histograms)?;
    write_histograms(&dir.join(CORRELATION_HISTOGRAM_CSV), &report.correlation_histograms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_and_uninformative_scores() {
        let sep = [(0.9, true), (0.9, true), (0.1, false), (0.1, false)];
        assert_eq!(best_threshold_accuracy(&sep).accuracy, 1.0);
        let flat = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(best_threshold_accuracy(&flat).accuracy, 0.5);
    }

    #[test]
    fn biasness_rejects_single_group() {
        assert!(biasness(&[0.9]).is_err());
        assert_eq!(biasness(&[0.75, 0.75, 0.75]).unwrap().std, 0.0);
    }

    #[test]
    fn histogram_edges() {
        let h = Histogram::new(&[-1.0, 1.0, 0.0], -1.0, 1.0, 4);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
        assert_eq!(h.edges.len(), 5);
    }
}
