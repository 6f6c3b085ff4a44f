//! Deterministic training loop, embedding extraction and parameter
//! accounting.
//!
//! A step embeds every sample of the batch in its own graph, stacks the
//! raw embeddings into a leaf of a second graph holding the loss,
//! and pushes the loss gradient back through each per-sample graph.
//! Gradients are summed in fixed chunks so sequential and parallel runs
//! agree bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::automation::{AutomationConfig, Monitor};
use crate::data::Dataset;
use crate::demog::LabelProvider;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::layers::{LayerKind, Network, NetworkConfig, Placement, Preset};
use crate::losses::{debias_stats, record_total_loss, EmbeddingBatch, MarginConfig};
use crate::optim::{GradSlots, Sgd, SgdConfig, CHUNK};
use crate::rng::{stream_rng, TAG_SAMPLER};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const AUTOMATION_TRACE: &str = "automation_trace.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_MANIFEST: &str = "eval_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Gac,
    GacChannel,
    GacKernel,
    GacSpatial,
    GacCs,
    GacCsk,
    AlManual,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::Gac,
        Variant::GacChannel,
        Variant::GacKernel,
        Variant::GacSpatial,
        Variant::GacCs,
        Variant::GacCsk,
        Variant::AlManual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gac => "gac",
            Variant::GacChannel => "gac-channel",
            Variant::GacKernel => "gac-kernel",
            Variant::GacSpatial => "gac-spatial",
            Variant::GacCs => "gac-cs",
            Variant::GacCsk => "gac-csk",
            Variant::AlManual => "al-manual",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant '{name}'; valid variants: {}", names.join(", ")))
        })
    }

    /// `(kernels, channel attention, spatial attention)`.
    fn mechanisms(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Gac | Variant::AlManual => (true, true, false),
            Variant::GacChannel => (false, true, false),
            Variant::GacKernel => (true, false, false),
            Variant::GacSpatial => (false, false, true),
            Variant::GacCs => (false, true, true),
            Variant::GacCsk => (true, true, true),
        }
    }

    fn default_placement(self) -> Placement {
        match self {
            Variant::Baseline => Placement::None,
            Variant::AlManual => Placement::Manual,
            _ => Placement::Automatic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Overrides the variant's placement when set.
    pub placement: Option<Placement>,
    pub preset: Preset,
    pub embedding_dim: usize,
    pub batch_size: usize,
    /// Images of each subject drawn into a batch; at least 2.
    pub images_per_subject: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub optimizer: SgdConfig,
    pub margin: MarginConfig,
    pub automation: AutomationConfig,
    pub seed: u64,
    /// Keeps a copy of every bank at each automation check.
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gac,
            placement: None,
            preset: Preset::Small,
            embedding_dim: 64,
            batch_size: 64,
            images_per_subject: 4,
            base_lr: 0.1,
            decay_epochs: vec![10, 16],
            decay_factor: 0.1,
            lr_floor: 1e-4,
            epochs: 20,
            optimizer: SgdConfig::default(),
            margin: MarginConfig::default(),
            automation: AutomationConfig {
                check_period: 20,
                ..AutomationConfig::default()
            },
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.images_per_subject < 2 {
            return Err(Error::Config("images_per_subject must be >= 2".into()));
        }
        if self.batch_size < self.images_per_subject {
            return Err(Error::Config("batch_size must hold at least one subject".into()));
        }
        if !(self.base_lr > 0.0) || !(self.lr_floor > 0.0) || self.lr_floor > self.base_lr {
            return Err(Error::Config("need 0 < lr_floor <= base_lr".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1)".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        self.optimizer.validate()?;
        self.margin.validate()?;
        self.automation.validate()
    }

    pub fn network_config(&self, nd: usize, image_shape: &[usize]) -> NetworkConfig {
        let (k, c, s) = self.variant.mechanisms();
        NetworkConfig {
            preset: self.preset,
            in_channels: image_shape[0],
            image_size: image_shape[1],
            embedding_dim: self.embedding_dim,
            nd,
            placement: self.placement.unwrap_or(self.variant.default_placement()),
            adaptive_kernels: k,
            channel_attention: c,
            spatial_attention: s,
            ..NetworkConfig::default()
        }
    }

    /// The baseline variant carries no de-biasing term.
    pub fn effective_margin(&self) -> MarginConfig {
        match self.variant {
            Variant::Baseline => MarginConfig {
                lambda: 0.0,
                ..self.margin.clone()
            },
            _ => self.margin.clone(),
        }
    }

    /// `max(base * factor^k, floor)` where `k` counts decay epochs `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        (self.base_lr * self.decay_factor.powi(k as i32)).max(self.lr_floor)
    }
}

/// Draws `S` subjects x `P` images per group for each batch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    by_group: Vec<Vec<usize>>,
    images: BTreeMap<usize, Vec<usize>>,
    subjects_per_group: usize,
    images_per_subject: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, images_per_subject: usize, seed: u64) -> Result<Self> {
        let images = dataset.images_by_subject();
        let by_group: Vec<Vec<usize>> = dataset
            .subjects_by_group()
            .into_iter()
            .map(|s| s.into_iter().filter(|j| images[j].len() >= 2).collect())
            .collect();
        let present = by_group.iter().filter(|s| !s.is_empty()).count();
        if present == 0 {
            return Err(Error::InvalidArgument("no subject has two or more images".into()));
        }
        Ok(Self {
            by_group,
            images,
            subjects_per_group: (batch_size / (present * images_per_subject)).max(1),
            images_per_subject,
            seed,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        let largest = self.by_group.iter().map(Vec::len).max().unwrap_or(0);
        largest.div_ceil(self.subjects_per_group).max(1)
    }

    /// Sample positions for every step of `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let nd = self.by_group.len();
        let mut rngs: Vec<ChaCha8Rng> = (0..nd)
            .map(|g| stream_rng(self.seed, TAG_SAMPLER, (epoch * nd + g) as u64))
            .collect();
        let orders: Vec<Vec<usize>> = self
            .by_group
            .iter()
            .zip(rngs.iter_mut())
            .map(|(subjects, rng)| {
                let mut s = subjects.clone();
                s.shuffle(rng);
                s
            })
            .collect();
        (0..self.steps_per_epoch())
            .map(|t| {
                let mut batch = Vec::new();
                for (order, rng) in orders.iter().zip(rngs.iter_mut()) {
                    let take = self.subjects_per_group.min(order.len());
                    for k in 0..take {
                        let j = order[(t * self.subjects_per_group + k) % order.len()];
                        let mut imgs = self.images[&j].clone();
                        imgs.shuffle(rng);
                        batch.extend(imgs.into_iter().take(self.images_per_subject));
                    }
                }
                batch
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParamCount {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub adaptive_extra: usize,
    pub acnn_extra: usize,
    /// `id * kc / nd` for adaptive convolutions.
    pub acnn_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub baseline_equivalent: usize,
    pub adaptive_extra: usize,
    pub acnn_id: usize,
    pub acnn_extra: usize,
    pub layers: Vec<LayerParamCount>,
}

pub fn adaptive_conv_extra(nd: usize, ic: usize, kh: usize, kw: usize) -> usize {
    nd * ic * kh * kw
}

pub fn attention_extra(nd: usize, kc: usize) -> usize {
    nd * kc
}

pub fn acnn_conv_extra(id: usize, kc: usize, ic: usize, kh: usize, kw: usize) -> usize {
    id * kc * ic * kh * kw
}

pub fn acnn_ratio(id: usize, kc: usize, nd: usize) -> f64 {
    (id * kc) as f64 / nd as f64
}

/// Parameter accounting against a kernel-generating alternative whose
/// conditioning input has `id` dimensions. Attention banks have no such
/// counterpart and contribute nothing to `acnn_extra`.
pub fn param_count(network: &Network, id: usize) -> ParamCount {
    let params = network.params();
    let nd = network.nd();
    let mut layers = Vec::new();
    for layer in network.adaptive_layers() {
        let shape = params.value(layer.param).shape().to_vec();
        let entry = match layer.state.kind {
            LayerKind::AdaptiveConv => {
                let conv = network
                    .conv_layers()
                    .iter()
                    .find(|c| c.masks == Some(layer.param))
                    .expect("mask bank belongs to a conv layer");
                let kc = params.value(conv.kernel).shape()[0];
                let (ic, kh, kw) = (shape[1], shape[2], shape[3]);
                LayerParamCount {
                    name: layer.name.clone(),
                    kind: layer.state.kind,
                    adaptive_extra: adaptive_conv_extra(nd, ic, kh, kw),
                    acnn_extra: acnn_conv_extra(id, kc, ic, kh, kw),
                    acnn_ratio: Some(acnn_ratio(id, kc, nd)),
                    shape,
                }
            }
            _ => LayerParamCount {
                name: layer.name.clone(),
                kind: layer.state.kind,
                adaptive_extra: attention_extra(nd, shape[1]),
                acnn_extra: 0,
                acnn_ratio: None,
                shape,
            },
        };
        layers.push(entry);
    }
    let total = params.numel();
    let adaptive_extra: usize = layers.iter().map(|l| l.adaptive_extra).sum();
    ParamCount {
        total,
        baseline_equivalent: total - adaptive_extra,
        adaptive_extra,
        acnn_id: id,
        acnn_extra: layers.iter().map(|l| l.acnn_extra).sum(),
        layers,
    }
}

/// Embeddings of `samples` routed by `labels`, L2-normalized when
/// `normalize` is set.
pub fn embed_samples(
    network: &Network,
    samples: &[&Tensor],
    labels: &[usize],
    normalize: bool,
    exec: Execution,
) -> Result<Tensor> {
    let rows: Vec<Result<Tensor>> = map_indexed(samples.len(), exec, |i| {
        let mut graph = Graph::new(network.params());
        let x = graph.input(samples[i].clone());
        let mut e = network.forward(&mut graph, x, labels[i])?;
        if normalize {
            e = graph.l2_normalize(e)?;
        }
        Ok(graph.value(e).clone())
    });
    let d = network.config().embedding_dim;
    let mut data = Vec::with_capacity(samples.len() * d);
    for r in rows {
        data.extend_from_slice(r?.data());
    }
    Tensor::new(vec![samples.len(), d], data)
}

/// Embeddings of `dataset` under the network stored in `checkpoint`, with
/// group routing from `provider`.
pub fn extract_embeddings(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    provider: &LabelProvider,
    exec: Execution,
) -> Result<EmbeddingBatch> {
    let network = Network::from_checkpoint(checkpoint)?;
    if network.nd() != provider.nd() || network.nd() != dataset.nd {
        return Err(Error::Checkpoint(format!(
            "checkpoint has nd = {}, provider {}, dataset {}",
            network.nd(),
            provider.nd(),
            dataset.nd
        )));
    }
    let c = network.config();
    if dataset.image_shape != [c.in_channels, c.image_size, c.image_size] {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}x{}x{} images, dataset images are {:?}",
            c.in_channels, c.image_size, c.image_size, dataset.image_shape
        )));
    }
    let labels = provider.provide_labels(&dataset.samples, exec)?;
    let images: Vec<&Tensor> = dataset.samples.iter().map(|s| &s.image).collect();
    let embeddings = embed_samples(&network, &images, &labels, true, exec)?;
    EmbeddingBatch::new(
        embeddings,
        dataset.samples.iter().map(|s| s.identity).collect(),
        labels,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub run_id: String,
    pub variant: Variant,
    pub label_mode: String,
    pub seed: u64,
    pub nd: usize,
    pub lambda: f64,
    pub tau: f64,
    pub checkpoint: String,
    pub steps: u64,
    pub epochs: usize,
    pub train_subjects: usize,
    pub train_samples: usize,
    pub final_ce_loss: f64,
    pub final_bias_loss: f64,
    /// Per-group mean intra-subject distance of the raw embeddings over the
    /// whole training set.
    pub final_group_distances: Vec<Option<f64>>,
    /// Population STD of the present entries of `final_group_distances`.
    pub final_distance_std: f64,
    /// As `final_group_distances`, on L2-normalized embeddings.
    pub final_group_distances_normalized: Vec<Option<f64>>,
    pub adaptive_layers: Vec<String>,
    pub merged_layers: Vec<String>,
    pub param_count: ParamCount,
    pub train_identities: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub train_log: PathBuf,
    pub automation_trace: PathBuf,
    pub eval_manifest: PathBuf,
    pub manifest: EvalManifest,
    /// Total loss of every step.
    pub loss_trace: Vec<f64>,
    /// Number of merged layers after each automation check.
    pub merged_trace: Vec<usize>,
    /// `trajectory[t][l]`: bank of adaptive layer `l` before check `t`.
    pub trajectory: Vec<Vec<Tensor>>,
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Mean intra-subject distance of each group over all images of every
/// `(identity, group)` subject.
pub fn group_distances(batch: &EmbeddingBatch, nd: usize) -> Vec<Option<f64>> {
    let stats = debias_stats(&batch.embeddings, &batch.identities, &batch.groups, 0.0);
    (0..nd).map(|g| stats.group_distances.get(&g).copied()).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

struct StepOutput {
    ce: f64,
    bias: f64,
    group_distances: BTreeMap<usize, f64>,
    net_grads: GradSlots,
    head_grads: GradSlots,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    network: &Network,
    head: &ParamStore,
    head_weight: ParamId,
    train: &Dataset,
    batch: &[usize],
    routes: &[usize],
    classes: &BTreeMap<usize, usize>,
    margin: &MarginConfig,
    exec: Execution,
) -> Result<StepOutput> {
    let n = batch.len();
    let graphs: Vec<Result<(Graph<'_>, NodeId)>> = map_indexed(n, exec, |i| {
        let s = &train.samples[batch[i]];
        let mut graph = Graph::new(network.params());
        let x = graph.input(s.image.clone());
        let e = network.forward(&mut graph, x, routes[batch[i]])?;
        Ok((graph, e))
    });
    let graphs: Vec<(Graph<'_>, NodeId)> = graphs.into_iter().collect::<Result<_>>()?;
    let d = network.config().embedding_dim;
    let mut stacked = Vec::with_capacity(n * d);
    for (g, e) in &graphs {
        stacked.extend_from_slice(g.value(*e).data());
    }
    let stacked = Tensor::new(vec![n, d], stacked)?;
    let ids: Vec<usize> = batch.iter().map(|&i| classes[&train.samples[i].identity]).collect();
    let groups: Vec<usize> = batch.iter().map(|&i| routes[i]).collect();

    let mut loss_graph = Graph::new(head);
    let emb = loss_graph.input_with_grad(stacked.clone());
    let w = loss_graph.param(head_weight);
    let nodes = record_total_loss(&mut loss_graph, emb, w, &ids, &groups, margin)?;
    let ce = loss_graph.value(nodes.classification).item();
    let bias = loss_graph.value(nodes.bias).item();
    let loss_grads = loss_graph.backward(nodes.total)?;
    let mut head_grads: GradSlots = vec![None; head.len()];
    loss_grads.accumulate_into(&mut head_grads);
    let d_emb = loss_grads.node(emb).cloned().unwrap_or_else(|| Tensor::zeros(&[n, d]));

    let partial: Vec<Result<GradSlots>> = map_indexed(n.div_ceil(CHUNK), exec, |c| {
        let mut slots: GradSlots = vec![None; network.params().len()];
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let (g, e) = &graphs[i];
            let seed = Tensor::vector(d_emb.row(i));
            g.backward_with(*e, seed)?.accumulate_into(&mut slots);
        }
        Ok(slots)
    });
    let mut net_grads: GradSlots = vec![None; network.params().len()];
    for p in partial {
        for (acc, g) in net_grads.iter_mut().zip(p?) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let group_distances = debias_stats(&stacked, &ids, &groups, 0.0).group_distances;
    Ok(StepOutput {
        ce,
        bias,
        group_distances,
        net_grads,
        head_grads,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn write_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::io(path, e.into()))
}

/// Trains one model on `dataset` and writes its artifacts into `out_dir`.
pub fn train_run(
    cfg: &TrainConfig,
    dataset: &Dataset,
    provider: &LabelProvider,
    out_dir: &Path,
    exec: Execution,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if provider.nd() != dataset.nd {
        return Err(Error::InvalidArgument(format!(
            "label provider has nd = {}, dataset has nd = {}",
            provider.nd(),
            dataset.nd
        )));
    }
    let net_cfg = cfg.network_config(dataset.nd, &dataset.image_shape);
    let mut network = Network::new(net_cfg, cfg.seed)?;
    if network.nd() != provider.nd() {
        return Err(Error::InvalidArgument("network and provider disagree on nd".into()));
    }
    let margin = cfg.effective_margin();
    let routes = provider.provide_labels(&dataset.samples, exec)?;
    let classes: BTreeMap<usize, usize> = dataset.identities().into_iter().enumerate().map(|(c, j)| (j, c)).collect();

    let mut head = ParamStore::default();
    let head_weight = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4EAD);
        let d = cfg.embedding_dim;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite");
        let data = (0..classes.len() * d).map(|_| normal.sample(&mut rng)).collect();
        head.add("cosface.weight", Tensor::new(vec![classes.len(), d], data)?)
    };
    let no_decay = |name: &str| name.ends_with(".masks") || name.ends_with(".maps") || name.ends_with(".bias");
    let mut net_opt = Sgd::new(cfg.optimizer.clone(), network.params(), no_decay);
    let mut head_opt = Sgd::new(cfg.optimizer.clone(), &head, |_| false);
    let mut monitor = Monitor::new(cfg.automation.clone(), network.adaptive_layers().len())?;
    let sampler = BatchSampler::new(dataset, cfg.batch_size, cfg.images_per_subject, cfg.seed)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let trace_path = out_dir.join(AUTOMATION_TRACE);
    let mut log = csv_writer(&log_path)?;
    let mut trace = csv_writer(&trace_path)?;
    let nd = dataset.nd;
    let mut header: Vec<String> = ["step", "epoch", "lr", "ce_loss", "bias_loss", "total_loss", "grad_norm", "merged_layers"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..nd).map(|g| format!("dist_g{g}")));
    write_row(&mut log, &log_path, &header)?;
    write_row(
        &mut trace,
        &trace_path,
        &["step", "layer_id", "layer", "kind", "mean_similarity", "decision", "shared"].map(String::from),
    )?;

    let mut step: u64 = 0;
    let mut loss_trace = Vec::new();
    let mut merged_trace = Vec::new();
    let mut trajectory = Vec::new();
    let (mut last_ce, mut last_bias) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for batch in sampler.epoch(epoch) {
            step += 1;
            let out = train_step(&network, &head, head_weight, dataset, &batch, &routes, &classes, &margin, exec)?;
            let total = out.ce + out.bias;
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let g1 = net_opt.step(network.params_mut(), &out.net_grads, lr);
            let g2 = head_opt.step(&mut head, &out.head_grads, lr);
            let grad_norm = (g1 * g1 + g2 * g2).sqrt();

            if monitor.is_due(step) {
                if cfg.record_trajectory {
                    trajectory.push(
                        network
                            .adaptive_layers()
                            .iter()
                            .map(|l| network.params().value(l.param).clone())
                            .collect(),
                    );
                }
                let reports = monitor.check(&mut network, step);
                for r in &reports {
                    let layer = &network.adaptive_layers()[r.layer_id];
                    let decision = if r.mean_similarity > cfg.automation.tau { "merge" } else { "keep" };
                    write_row(
                        &mut trace,
                        &trace_path,
                        &[
                            step.to_string(),
                            r.layer_id.to_string(),
                            layer.name.clone(),
                            format!("{:?}", layer.state.kind),
                            r.mean_similarity.to_string(),
                            decision.to_string(),
                            layer.state.shared_flag.to_string(),
                        ],
                    )?;
                }
                merged_trace.push(network.adaptive_layers().iter().filter(|l| l.state.shared_flag).count());
            }

            let merged = network.adaptive_layers().iter().filter(|l| l.state.shared_flag).count();
            let mut row = vec![
                step.to_string(),
                epoch.to_string(),
                lr.to_string(),
                out.ce.to_string(),
                out.bias.to_string(),
                total.to_string(),
                grad_norm.to_string(),
                merged.to_string(),
            ];
            row.extend((0..nd).map(|g| fmt_opt(out.group_distances.get(&g).copied())));
            write_row(&mut log, &log_path, &row)?;
            debug!("step {step}: ce {:.4} bias {:.4}", out.ce, out.bias);
            loss_trace.push(total);
            (last_ce, last_bias) = (out.ce, out.bias);
        }
        info!("epoch {epoch}: lr {lr}, last loss {:.4}", last_ce + last_bias);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;

    let checkpoint_dir = out_dir.join(CHECKPOINT_DIR);
    network.to_checkpoint(&[])?.save(&checkpoint_dir)?;

    let images: Vec<&Tensor> = dataset.samples.iter().map(|s| &s.image).collect();
    let identities: Vec<usize> = dataset.samples.iter().map(|s| s.identity).collect();
    let raw = EmbeddingBatch::new(
        embed_samples(&network, &images, &routes, false, exec)?,
        identities.clone(),
        routes.clone(),
    )?;
    let unit = EmbeddingBatch::new(
        embed_samples(&network, &images, &routes, true, exec)?,
        identities,
        routes.clone(),
    )?;
    let final_group_distances = group_distances(&raw, nd);
    let final_group_distances_normalized = group_distances(&unit, nd);
    let present: Vec<f64> = final_group_distances.iter().flatten().copied().collect();
    if present.len() < nd {
        warn!("{} of {nd} groups have no subject with two images", nd - present.len());
    }
    let manifest = EvalManifest {
        run_id: format!("{}-seed{}", cfg.variant.name(), cfg.seed),
        variant: cfg.variant,
        label_mode: provider.mode().name().to_string(),
        seed: cfg.seed,
        nd,
        lambda: margin.lambda,
        tau: cfg.automation.tau,
        checkpoint: CHECKPOINT_DIR.to_string(),
        steps: step,
        epochs: cfg.epochs,
        train_subjects: classes.len(),
        train_samples: dataset.len(),
        final_ce_loss: last_ce,
        final_bias_loss: last_bias,
        final_distance_std: population_std(&present),
        final_group_distances,
        final_group_distances_normalized,
        adaptive_layers: network.adaptive_layers().iter().map(|l| l.name.clone()).collect(),
        merged_layers: network
            .adaptive_layers()
            .iter()
            .filter(|l| l.state.shared_flag)
            .map(|l| l.name.clone())
            .collect(),
        param_count: param_count(&network, nd),
        train_identities: dataset.identities(),
    };
    let manifest_path = out_dir.join(EVAL_MANIFEST);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        checkpoint_dir,
        train_log: log_path,
        automation_trace: trace_path,
        eval_manifest: manifest_path,
        manifest,
        loss_trace,
        merged_trace,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            decay_epochs: vec![2, 4, 6],
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..8).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[0], 0.1);
        assert!((lrs[2] - 0.01).abs() < 1e-15);
        assert!((lrs[7] - 1e-4).abs() < 1e-15);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        let err = Variant::parse("gac-x").unwrap_err().to_string();
        assert!(err.contains("al-manual"));
    }

    #[test]
    fn accounting_formulas() {
        assert_eq!(adaptive_conv_extra(4, 64, 3, 3), 2304);
        assert_eq!(adaptive_conv_extra(1, 64, 3, 3), 576);
        assert_eq!(acnn_ratio(4, 128, 4), 128.0);
    }
}
