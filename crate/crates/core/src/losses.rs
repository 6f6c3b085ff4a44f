//! Additive cosine-margin classification loss and the intra-class distance
//! de-biasing term.
//!
//! De-biasing statistics are computed per mini-batch. A subject `(j, g)` is
//! retained when it has at least two embeddings in the batch; its distance
//! is the mean squared Euclidean distance of those embeddings to their
//! centroid. The penalty is `lambda / T * sum_k |Dist_k - mean_g Dist_g|`
//! over the `T` retained subjects, where the inner mean runs over the
//! retained groups.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::NORM_EPS;
use crate::tensor::{dot, CustomOp, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
            lambda: 0.1,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config("margin scale must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config("margin must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Embeddings with aligned identity and group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `B x d`.
    pub embeddings: Tensor,
    pub identities: Vec<usize>,
    pub groups: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, identities: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != identities.len() || identities.len() != groups.len() {
            return Err(Error::shape(
                "embedding batch",
                format!(
                    "embeddings {:?}, {} identities, {} groups",
                    embeddings.shape(),
                    identities.len(),
                    groups.len()
                ),
            ));
        }
        Ok(Self {
            embeddings,
            identities,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = dot(v, v).sqrt();
    if norm <= NORM_EPS {
        return Err(Error::DegenerateVector { norm, eps: NORM_EPS });
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// `s * (cos(e, w_c) - m * [c == label])` for every class `c`.
pub fn cosface_logits(embedding: &Tensor, class_weights: &Tensor, label: usize, cfg: &MarginConfig) -> Result<Tensor> {
    if class_weights.rank() != 2 || class_weights.shape()[1] != embedding.numel() {
        return Err(Error::shape(
            "cosface_logits",
            format!("class weights {:?} vs embedding {:?}", class_weights.shape(), embedding.shape()),
        ));
    }
    let classes = class_weights.shape()[0];
    if label >= classes {
        return Err(Error::InvalidArgument(format!("label {label} >= {classes} classes")));
    }
    let (e, _) = unit(embedding.data())?;
    let logits = (0..classes)
        .map(|c| {
            let (w, _) = unit(class_weights.row(c))?;
            let margin = if c == label { cfg.margin } else { 0.0 };
            Ok(cfg.scale * (dot(&e, &w) - margin))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::vector(&logits))
}

/// `-log softmax(logits)[label]` and the softmax probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = max + z.ln() - logits[label];
    (loss, probs)
}

/// Mean cosine-margin cross-entropy over a `B x d` batch against `C x d`
/// class weights.
pub struct CosfaceCrossEntropy {
    pub labels: Vec<usize>,
    pub scale: f64,
    pub margin: f64,
}

impl CosfaceCrossEntropy {
    fn normalized_rows(t: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut rows = Vec::with_capacity(t.shape()[0]);
        let mut norms = Vec::with_capacity(t.shape()[0]);
        for r in 0..t.shape()[0] {
            let (u, n) = unit(t.row(r))?;
            rows.push(u);
            norms.push(n);
        }
        Ok((rows, norms))
    }

    /// Cosines `cos[b][c]` plus normalized operands.
    #[allow(clippy::type_complexity)]
    fn cosines(&self, emb: &Tensor, weights: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        let (e, en) = Self::normalized_rows(emb)?;
        let (w, wn) = Self::normalized_rows(weights)?;
        let cos = e.iter().map(|eb| w.iter().map(|wc| dot(eb, wc)).collect()).collect();
        Ok((cos, e, en, w, wn))
    }

    fn logits(&self, cos: &[f64], label: usize) -> Vec<f64> {
        cos.iter()
            .enumerate()
            .map(|(c, &v)| self.scale * (v - if c == label { self.margin } else { 0.0 }))
            .collect()
    }
}

impl CustomOp for CosfaceCrossEntropy {
    fn name(&self) -> &'static str {
        "cosface_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (emb, weights) = (inputs[0], inputs[1]);
        if emb.rank() != 2
            || weights.rank() != 2
            || emb.shape()[1] != weights.shape()[1]
            || emb.shape()[0] != self.labels.len()
        {
            return Err(Error::shape(
                "cosface_cross_entropy",
                format!("embeddings {:?}, weights {:?}, {} labels", emb.shape(), weights.shape(), self.labels.len()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= weights.shape()[0]) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {} classes", weights.shape()[0])));
        }
        let (cos, ..) = self.cosines(emb, weights)?;
        let total: f64 = cos
            .iter()
            .zip(&self.labels)
            .map(|(c, &y)| cross_entropy(&self.logits(c, y), y).0)
            .sum();
        Ok(Tensor::scalar(total / self.labels.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (emb, weights) = (inputs[0], inputs[1]);
        let (cos, e, en, w, wn) = self.cosines(emb, weights).expect("validated in forward");
        let (b, d) = (emb.shape()[0], emb.shape()[1]);
        let classes = weights.shape()[0];
        let upstream = grad_out.item() / b as f64;

        let mut d_e_unit = vec![vec![0.0; d]; b];
        let mut d_w_unit = vec![vec![0.0; d]; classes];
        for i in 0..b {
            let y = self.labels[i];
            let (_, probs) = cross_entropy(&self.logits(&cos[i], y), y);
            for c in 0..classes {
                let d_cos = upstream * self.scale * (probs[c] - if c == y { 1.0 } else { 0.0 });
                for k in 0..d {
                    d_e_unit[i][k] += d_cos * w[c][k];
                    d_w_unit[c][k] += d_cos * e[i][k];
                }
            }
        }

        let through_norm = |u: &[f64], du: &[f64], norm: f64| -> Vec<f64> {
            let proj = dot(u, du);
            u.iter().zip(du).map(|(ui, dui)| (dui - ui * proj) / norm).collect::<Vec<_>>()
        };
        let d_emb: Vec<f64> = (0..b).flat_map(|i| through_norm(&e[i], &d_e_unit[i], en[i])).collect();
        let d_w: Vec<f64> = (0..classes).flat_map(|c| through_norm(&w[c], &d_w_unit[c], wn[c])).collect();
        vec![
            Some(Tensor::new(emb.shape().to_vec(), d_emb).expect("shape")),
            Some(Tensor::new(weights.shape().to_vec(), d_w).expect("shape")),
        ]
    }
}

/// Batch rows belonging to each `(identity, group)` subject with at least
/// two embeddings.
pub fn retained_subjects(identities: &[usize], groups: &[usize]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut by_subject: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (row, (&j, &g)) in identities.iter().zip(groups).enumerate() {
        by_subject.entry((j, g)).or_default().push(row);
    }
    by_subject.retain(|_, rows| rows.len() >= 2);
    by_subject
}

/// Centroid of every retained subject.
pub fn subject_centers(batch: &EmbeddingBatch) -> BTreeMap<(usize, usize), Vec<f64>> {
    retained_subjects(&batch.identities, &batch.groups)
        .into_iter()
        .map(|(key, rows)| {
            let embs: Vec<&[f64]> = rows.iter().map(|&r| batch.row(r)).collect();
            (key, centroid(&embs))
        })
        .collect()
}

pub fn centroid(embeddings: &[&[f64]]) -> Vec<f64> {
    let d = embeddings[0].len();
    let mut mu = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mu.iter_mut().zip(e.iter()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
    mu
}

/// Mean squared Euclidean distance of `embeddings` to `center`.
pub fn subject_intra_distance(embeddings: &[&[f64]], center: &[f64]) -> f64 {
    let total: f64 = embeddings
        .iter()
        .map(|e| e.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    total / embeddings.len() as f64
}

pub fn group_intra_distance(subject_distances: &[f64]) -> Result<f64> {
    if subject_distances.is_empty() {
        return Err(Error::InvalidArgument("group has no retained subjects".into()));
    }
    Ok(subject_distances.iter().sum::<f64>() / subject_distances.len() as f64)
}

/// `lambda / T * sum_k |Dist_k - mean(group_distances)|`; zero when fewer
/// than two groups are retained.
pub fn debias_loss(subject_distances: &[f64], group_distances: &[f64], lambda: f64) -> f64 {
    if group_distances.len() < 2 || subject_distances.is_empty() {
        return 0.0;
    }
    let target = group_distances.iter().sum::<f64>() / group_distances.len() as f64;
    let dev: f64 = subject_distances.iter().map(|d| (d - target).abs()).sum();
    lambda * dev / subject_distances.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDistance {
    pub identity: usize,
    pub group: usize,
    pub rows: Vec<usize>,
    pub center: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasStats {
    pub subjects: Vec<SubjectDistance>,
    /// `Dist_g` for each retained group.
    pub group_distances: BTreeMap<usize, f64>,
    pub loss: f64,
    /// Set when fewer than two groups have retained subjects.
    pub warning: Option<String>,
}

pub fn debias_stats(embeddings: &Tensor, identities: &[usize], groups: &[usize], lambda: f64) -> DebiasStats {
    let subjects: Vec<SubjectDistance> = retained_subjects(identities, groups)
        .into_iter()
        .map(|((identity, group), rows)| {
            let embs: Vec<&[f64]> = rows.iter().map(|&r| embeddings.row(r)).collect();
            let center = centroid(&embs);
            let distance = subject_intra_distance(&embs, &center);
            SubjectDistance {
                identity,
                group,
                rows,
                center,
                distance,
            }
        })
        .collect();

    let mut per_group: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in &subjects {
        per_group.entry(s.group).or_default().push(s.distance);
    }
    let group_distances: BTreeMap<usize, f64> = per_group
        .iter()
        .map(|(&g, d)| (g, group_intra_distance(d).expect("non-empty")))
        .collect();

    let warning = (group_distances.len() < 2).then(|| {
        format!(
            "de-biasing term inactive: {} retained group(s), {} retained subject(s)",
            group_distances.len(),
            subjects.len()
        )
    });
    let dists: Vec<f64> = subjects.iter().map(|s| s.distance).collect();
    let gd: Vec<f64> = group_distances.values().copied().collect();
    let loss = debias_loss(&dists, &gd, lambda);
    DebiasStats {
        subjects,
        group_distances,
        loss,
        warning,
    }
}

/// De-biasing penalty over a `B x d` embedding batch.
pub struct DebiasPenalty {
    pub identities: Vec<usize>,
    pub groups: Vec<usize>,
    pub lambda: f64,
}

impl CustomOp for DebiasPenalty {
    fn name(&self) -> &'static str {
        "debias_penalty"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let emb = inputs[0];
        if emb.rank() != 2 || emb.shape()[0] != self.identities.len() || self.identities.len() != self.groups.len() {
            return Err(Error::shape(
                "debias_penalty",
                format!("embeddings {:?} vs {} labels", emb.shape(), self.identities.len()),
            ));
        }
        Ok(Tensor::scalar(debias_stats(emb, &self.identities, &self.groups, self.lambda).loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let emb = inputs[0];
        let stats = debias_stats(emb, &self.identities, &self.groups, self.lambda);
        let mut d_emb = Tensor::zeros_like(emb);
        let retained_groups = stats.group_distances.len();
        if retained_groups < 2 || self.lambda == 0.0 {
            return vec![Some(d_emb)];
        }
        let total = stats.subjects.len() as f64;
        let target = stats.group_distances.values().sum::<f64>() / retained_groups as f64;
        let sign = |x: f64| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        let mut group_sizes: BTreeMap<usize, f64> = BTreeMap::new();
        for s in &stats.subjects {
            *group_sizes.entry(s.group).or_default() += 1.0;
        }
        let sign_sum: f64 = stats.subjects.iter().map(|s| sign(s.distance - target)).sum();
        let upstream = grad_out.item() * self.lambda / total;

        for s in &stats.subjects {
            let d_dist =
                upstream * (sign(s.distance - target) - sign_sum / (retained_groups as f64 * group_sizes[&s.group]));
            let n = s.rows.len() as f64;
            for &r in &s.rows {
                let row = emb.row(r);
                for ((g, e), m) in d_emb.row_mut(r).iter_mut().zip(row).zip(&s.center) {
                    *g += d_dist * 2.0 * (e - m) / n;
                }
            }
        }
        vec![Some(d_emb)]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub classification: NodeId,
    pub bias: NodeId,
}

/// Records classification + de-biasing loss over a `B x d` embedding node.
pub fn record_total_loss(
    graph: &mut Graph<'_>,
    embeddings: NodeId,
    class_weights: NodeId,
    identities: &[usize],
    groups: &[usize],
    cfg: &MarginConfig,
) -> Result<LossNodes> {
    let classification = graph.custom(
        &[embeddings, class_weights],
        Box::new(CosfaceCrossEntropy {
            labels: identities.to_vec(),
            scale: cfg.scale,
            margin: cfg.margin,
        }),
    )?;
    let bias = graph.custom(
        &[embeddings],
        Box::new(DebiasPenalty {
            identities: identities.to_vec(),
            groups: groups.to_vec(),
            lambda: cfg.lambda,
        }),
    )?;
    let total = graph.add(classification, bias)?;
    Ok(LossNodes {
        total,
        classification,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub bias: f64,
    pub group_distances: BTreeMap<usize, f64>,
    pub warning: Option<String>,
}

/// Classification loss (identities used as class indices) plus the
/// de-biasing penalty.
pub fn total_loss(batch: &EmbeddingBatch, class_weights: &Tensor, cfg: &MarginConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let ce = CosfaceCrossEntropy {
        labels: batch.identities.clone(),
        scale: cfg.scale,
        margin: cfg.margin,
    }
    .forward(&[&batch.embeddings, class_weights])?
    .item();
    let stats = debias_stats(&batch.embeddings, &batch.identities, &batch.groups, cfg.lambda);
    if let Some(w) = &stats.warning {
        warn!("{w}");
    }
    Ok(LossBreakdown {
        total: ce + stats.loss,
        classification: ce,
        bias: stats.loss,
        group_distances: stats.group_distances,
        warning: stats.warning,
    })
}

/// Plain softmax cross-entropy of a logit vector against one label.
pub struct SoftmaxCrossEntropy {
    pub label: usize,
}

impl CustomOp for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let logits = inputs[0];
        if self.label >= logits.numel() {
            return Err(Error::InvalidArgument(format!(
                "label {} >= {} logits",
                self.label,
                logits.numel()
            )));
        }
        Ok(Tensor::scalar(cross_entropy(logits.data(), self.label).0))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let (_, mut probs) = cross_entropy(logits.data(), self.label);
        probs[self.label] -= 1.0;
        let g = grad_out.item();
        probs.iter_mut().for_each(|p| *p *= g);
        vec![Some(Tensor::new(logits.shape().to_vec(), probs).expect("shape"))]
    }
}
