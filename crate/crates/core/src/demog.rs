//! Group labels for routing samples through the adaptive layers: ground
//! truth, estimated by a frozen classifier, or uniformly random.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, split_fold, Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::losses::SoftmaxCrossEntropy;
use crate::optim::{batch_gradients, Sgd, SgdConfig};
use crate::rng::{stream_rng, TAG_LABELS};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

const ARCH_KIND: &str = "group_classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    GroundTruth,
    Estimated,
    Random,
}

impl LabelMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ground-truth" => Ok(Self::GroundTruth),
            "estimated" => Ok(Self::Estimated),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown label mode '{other}' (expected ground-truth, estimated or random)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GroundTruth => "ground-truth",
            Self::Estimated => "estimated",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierArch {
    kind: String,
    nd: usize,
    in_channels: usize,
    widths: [usize; 2],
}

/// Two strided conv blocks, global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct GroupClassifier {
    arch: ClassifierArch,
    params: ParamStore,
    conv: [ParamId; 2],
    bias: [ParamId; 2],
    head_weight: ParamId,
    head_bias: ParamId,
}

impl GroupClassifier {
    pub fn new(nd: usize, in_channels: usize, seed: u64) -> Result<Self> {
        if nd < 2 {
            return Err(Error::InvalidArgument(format!("group classifier needs nd >= 2, got {nd}")));
        }
        let widths = [8, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let mut params = ParamStore::default();
        let c1 = params.add("conv1.kernel", he(&[widths[0], in_channels, 3, 3], in_channels * 9));
        let b1 = params.add("conv1.bias", Tensor::zeros(&[widths[0], 1, 1]));
        let c2 = params.add("conv2.kernel", he(&[widths[1], widths[0], 3, 3], widths[0] * 9));
        let b2 = params.add("conv2.bias", Tensor::zeros(&[widths[1], 1, 1]));
        let hw = params.add("head.weight", he(&[nd, widths[1]], widths[1]));
        let hb = params.add("head.bias", Tensor::zeros(&[nd]));
        Ok(Self {
            arch: ClassifierArch {
                kind: ARCH_KIND.into(),
                nd,
                in_channels,
                widths,
            },
            params,
            conv: [c1, c2],
            bias: [b1, b2],
            head_weight: hw,
            head_bias: hb,
        })
    }

    pub fn nd(&self) -> usize {
        self.arch.nd
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, graph: &mut Graph<'_>, image: NodeId) -> Result<NodeId> {
        let mut x = image;
        for (k, b) in self.conv.iter().zip(&self.bias) {
            let k = graph.param(*k);
            let y = graph.conv2d(x, k, 2, 1)?;
            let b = graph.param(*b);
            let y = graph.custom(&[y, b], Box::new(ChannelBias))?;
            x = graph.relu(y)?;
        }
        let pooled = graph.global_avg_pool(x)?;
        let (w, b) = (graph.param(self.head_weight), graph.param(self.head_bias));
        graph.linear(pooled, w, Some(b))
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new(&self.params);
        let x = graph.input(image.clone());
        let out = self.forward(&mut graph, x)?;
        Ok(graph.value(out).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        let mut best = 0;
        for (i, v) in logits.data().iter().enumerate() {
            if *v > logits.data()[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            arch: Some(serde_json::to_value(&self.arch)?),
            tensors: self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch: ClassifierArch = serde_json::from_value(
            ckpt.arch
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no arch entry".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("not a group classifier checkpoint: {e}")))?;
        if arch.kind != ARCH_KIND {
            return Err(Error::Checkpoint(format!("checkpoint holds a '{}', not a {ARCH_KIND}", arch.kind)));
        }
        let mut net = Self::new(arch.nd, arch.in_channels, 0)?;
        for (_, p) in net.params.iter_mut() {
            let stored = ckpt.get(&p.name)?;
            if stored.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("tensor '{}' has the wrong shape", p.name)));
            }
            p.value = stored.clone();
        }
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

/// Adds a `C x 1 x 1` bias to a `C x H x W` map.
struct ChannelBias;

impl crate::tensor::CustomOp for ChannelBias {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, b) = (inputs[0], inputs[1]);
        let c = x.shape()[0];
        if b.numel() != c {
            return Err(Error::shape("channel_bias", format!("{:?} vs {:?}", x.shape(), b.shape())));
        }
        let plane = x.numel() / c;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / plane];
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (x, b) = (inputs[0], inputs[1]);
        let plane = x.numel() / x.shape()[0];
        let mut db = Tensor::zeros_like(b);
        for (i, g) in grad_out.data().iter().enumerate() {
            db.data_mut()[i / plane] += g;
        }
        vec![Some(grad_out.clone()), Some(db)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Folds used to hold out subjects for the accuracy report.
    pub holdout_folds: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.05,
            batch_size: 32,
            holdout_folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub per_group_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub held_out_samples: usize,
}

/// Accuracy of `classifier` on every group present in `dataset`; absent
/// groups report `NaN`.
pub fn classifier_accuracy(classifier: &GroupClassifier, dataset: &Dataset, exec: Execution) -> Result<ClassifierReport> {
    let preds = map_slice(&dataset.samples, exec, |s| classifier.predict(&s.image));
    let mut hits = vec![0usize; dataset.nd];
    let mut totals = vec![0usize; dataset.nd];
    for (s, p) in dataset.samples.iter().zip(preds) {
        totals[s.group] += 1;
        hits[s.group] += usize::from(p? == s.group);
    }
    let per_group: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_group.iter().copied().filter(|a| a.is_finite()).collect();
    Ok(ClassifierReport {
        mean_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
        per_group_accuracy: per_group,
        held_out_samples: dataset.len(),
    })
}

/// Trains on all but one subject-disjoint fold and reports accuracy on the
/// held-out fold.
pub fn train_group_classifier(
    dataset: &Dataset,
    cfg: &ClassifierConfig,
    exec: Execution,
) -> Result<(GroupClassifier, ClassifierReport)> {
    let present = dataset.subjects_by_group().iter().filter(|s| !s.is_empty()).count();
    if dataset.nd < 2 || present < 2 {
        return Err(Error::InvalidArgument(
            "group classifier needs a dataset with at least two groups".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("classifier epochs, batch_size and lr must be positive".into()));
    }
    let (train, held_out) = if cfg.holdout_folds >= 2 {
        let folds = make_folds(dataset, cfg.holdout_folds, cfg.seed)?;
        split_fold(dataset, &folds, 0)?
    } else {
        (dataset.clone(), dataset.clone())
    };

    let mut net = GroupClassifier::new(dataset.nd, dataset.image_shape[0], cfg.seed)?;
    let mut opt = Sgd::new(
        SgdConfig {
            weight_decay: 1e-4,
            ..SgdConfig::default()
        },
        &net.params,
        |name| name.ends_with("bias"),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let (loss, grads) = batch_gradients(&net.params, batch.len(), exec, |g, i| {
                let s = &train.samples[batch[i]];
                let x = g.input(s.image.clone());
                let logits = net.forward(g, x)?;
                let ce = g.custom(&[logits], Box::new(SoftmaxCrossEntropy { label: s.group }))?;
                g.scale(ce, scale)
            })?;
            opt.step(&mut net.params, &grads, cfg.lr);
            epoch_loss += loss * batch.len() as f64;
        }
        info!("group classifier epoch {epoch}: loss {:.4}", epoch_loss / train.len() as f64);
    }
    let report = classifier_accuracy(&net, &held_out, exec)?;
    Ok((net, report))
}

/// Source of the group label used to route each sample.
#[derive(Debug, Clone)]
pub struct LabelProvider {
    mode: LabelMode,
    nd: usize,
    seed: u64,
    classifier: Option<GroupClassifier>,
}

impl LabelProvider {
    pub fn ground_truth(nd: usize) -> Self {
        Self {
            mode: LabelMode::GroundTruth,
            nd,
            seed: 0,
            classifier: None,
        }
    }

    pub fn random(nd: usize, seed: u64) -> Self {
        Self {
            mode: LabelMode::Random,
            nd,
            seed,
            classifier: None,
        }
    }

    pub fn estimated(classifier: GroupClassifier) -> Self {
        Self {
            mode: LabelMode::Estimated,
            nd: classifier.nd(),
            seed: 0,
            classifier: Some(classifier),
        }
    }

    /// Estimated mode loads its classifier from `classifier_dir`.
    pub fn from_mode(mode: LabelMode, nd: usize, seed: u64, classifier_dir: Option<&Path>) -> Result<Self> {
        match mode {
            LabelMode::GroundTruth => Ok(Self::ground_truth(nd)),
            LabelMode::Random => Ok(Self::random(nd, seed)),
            LabelMode::Estimated => {
                let dir = classifier_dir.ok_or_else(|| {
                    Error::InvalidArgument("estimated label mode requires a classifier checkpoint".into())
                })?;
                let clf = GroupClassifier::load(dir)?;
                if clf.nd() != nd {
                    return Err(Error::InvalidArgument(format!(
                        "classifier predicts {} groups, dataset has {nd}",
                        clf.nd()
                    )));
                }
                Ok(Self::estimated(clf))
            }
        }
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn label(&self, sample: &Sample) -> Result<usize> {
        match self.mode {
            LabelMode::GroundTruth => Ok(sample.group),
            LabelMode::Random => Ok(stream_rng(self.seed, TAG_LABELS, sample.id as u64).gen_range(0..self.nd)),
            LabelMode::Estimated => self
                .classifier
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("estimated label mode without a classifier".into()))?
                .predict(&sample.image),
        }
    }

    pub fn provide_labels(&self, samples: &[Sample], exec: Execution) -> Result<Vec<usize>> {
        map_slice(samples, exec, |s| self.label(s)).into_iter().collect()
    }
}
