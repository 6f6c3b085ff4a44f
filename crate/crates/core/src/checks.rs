//! Finite-difference checks of every differentiable layer and loss, over
//! randomly drawn shapes and values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::adaptive::{graph_channel_attention, graph_masked_kernel, graph_spatial_attention};
use crate::layers::{Network, NetworkConfig, Placement, Preset};
use crate::losses::{record_total_loss, CosfaceCrossEntropy, DebiasPenalty, MarginConfig};
use crate::rng::stream_rng;
use crate::tensor::{grad_check_piecewise, Graph, NodeId, ParamStore, PiecewiseCheck, Tensor};

const TAG_CHECKS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedOp {
    AdaptiveConv,
    AdaptiveAttention,
    SpatialAttention,
    CosfaceLoss,
    DebiasLoss,
    TotalLoss,
    Network,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 7] = [
        CheckedOp::AdaptiveConv,
        CheckedOp::AdaptiveAttention,
        CheckedOp::SpatialAttention,
        CheckedOp::CosfaceLoss,
        CheckedOp::DebiasLoss,
        CheckedOp::TotalLoss,
        CheckedOp::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::AdaptiveConv => "adaptive-conv",
            CheckedOp::AdaptiveAttention => "adaptive-attention",
            CheckedOp::SpatialAttention => "spatial-attention",
            CheckedOp::CosfaceLoss => "cosface-loss",
            CheckedOp::DebiasLoss => "debias-loss",
            CheckedOp::TotalLoss => "total-loss",
            CheckedOp::Network => "network",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: CheckedOp,
    pub configs: usize,
    pub max_error: f64,
    pub worst_seed: u64,
    pub checked_entries: usize,
    /// Entries whose finite difference straddled a ReLU kink.
    pub skipped_entries: usize,
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Contracts `node` against a fixed random tensor to get a scalar.
fn project(graph: &mut Graph<'_>, node: NodeId, rng: &mut impl Rng) -> Result<NodeId> {
    let n = graph.value(node).numel();
    let w = graph.input(randn(&[1, n], rng));
    let y = graph.linear(node, w, None)?;
    graph.sum(y)
}

/// Labels for `groups x subjects x images` rows, every subject with at
/// least two images.
fn toy_labels(groups: usize, subjects: usize, images: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut gs = Vec::new();
    for g in 0..groups {
        for s in 0..subjects {
            for _ in 0..images {
                ids.push(g * subjects + s);
                gs.push(g);
            }
        }
    }
    (ids, gs)
}

/// One randomly drawn configuration of `op`. Only the network contains
/// ReLUs, so only it can report skipped entries.
pub fn check_once(op: CheckedOp, seed: u64, eps: f64, preset: Preset) -> Result<PiecewiseCheck> {
    let mut rng = stream_rng(seed, TAG_CHECKS, op as u64);
    let mut store = ParamStore::default();
    match op {
        CheckedOp::AdaptiveConv => {
            let nd = rng.gen_range(1..=4);
            let (ic, kc, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), [1, 3][rng.gen_range(0..2)]);
            let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
            let stride = rng.gen_range(1..=2);
            let group = rng.gen_range(0..nd);
            let x = store.add("x", randn(&[ic, h, w], &mut rng));
            let base = store.add("base", randn(&[kc, ic, k, k], &mut rng));
            let masks = store.add("masks", randn(&[nd, ic, k, k], &mut rng).map(|v| 1.0 + 0.5 * v));
            let proj = randn(&[1, 1], &mut rng);
            let seed_rng = rng.gen::<u64>();
            grad_check_piecewise(&mut store, eps, |g| {
                let mut r = stream_rng(seed_rng, 0, 0);
                let (x, b, m) = (g.param(x), g.param(base), g.param(masks));
                let kernel = graph_masked_kernel(g, b, m, group)?;
                let y = g.conv2d(x, kernel, stride, k / 2)?;
                let out = project(g, y, &mut r)?;
                g.scale(out, proj.item())
            })
        }
        CheckedOp::AdaptiveAttention => {
            let nd = rng.gen_range(1..=4);
            let (kc, h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let group = rng.gen_range(0..nd);
            let x = store.add("x", randn(&[kc, h, w], &mut rng));
            let maps = store.add("maps", randn(&[nd, kc], &mut rng));
            let seed_rng = rng.gen::<u64>();
            grad_check_piecewise(&mut store, eps, |g| {
                let mut r = stream_rng(seed_rng, 0, 0);
                let (x, m) = (g.param(x), g.param(maps));
                let y = graph_channel_attention(g, x, m, group)?;
                project(g, y, &mut r)
            })
        }
        CheckedOp::SpatialAttention => {
            let (kc, h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let x = store.add("x", randn(&[kc, h, w], &mut rng));
            let weights = store.add("weights", randn(&[1, kc, 1, 1], &mut rng));
            let seed_rng = rng.gen::<u64>();
            grad_check_piecewise(&mut store, eps, |g| {
                let mut r = stream_rng(seed_rng, 0, 0);
                let (x, wt) = (g.param(x), g.param(weights));
                let y = graph_spatial_attention(g, x, wt)?;
                project(g, y, &mut r)
            })
        }
        CheckedOp::CosfaceLoss => {
            let (b, d, c) = (rng.gen_range(1..=6), rng.gen_range(2..=6), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            // Moderate scale keeps the softmax away from saturation.
            let (scale, margin) = (rng.gen_range(1.0..8.0), rng.gen_range(0.0..0.5));
            let e = store.add("embeddings", randn(&[b, d], &mut rng));
            let wts = store.add("class_weights", randn(&[c, d], &mut rng));
            grad_check_piecewise(&mut store, eps, |g| {
                let (e, w) = (g.param(e), g.param(wts));
                g.custom(
                    &[e, w],
                    Box::new(CosfaceCrossEntropy {
                        labels: labels.clone(),
                        scale,
                        margin,
                    }),
                )
            })
        }
        CheckedOp::DebiasLoss => {
            let groups = rng.gen_range(2..=4);
            let (ids, gs) = toy_labels(groups, rng.gen_range(1..=3), rng.gen_range(2..=3));
            let d = rng.gen_range(2..=5);
            let lambda = rng.gen_range(0.05..2.0);
            let e = store.add("embeddings", randn(&[ids.len(), d], &mut rng));
            grad_check_piecewise(&mut store, eps, |g| {
                let e = g.param(e);
                g.custom(
                    &[e],
                    Box::new(DebiasPenalty {
                        identities: ids.clone(),
                        groups: gs.clone(),
                        lambda,
                    }),
                )
            })
        }
        CheckedOp::TotalLoss => {
            let groups = rng.gen_range(2..=3);
            let (ids, gs) = toy_labels(groups, 2, 2);
            let d = rng.gen_range(2..=5);
            let cfg = MarginConfig {
                scale: rng.gen_range(1.0..8.0),
                margin: rng.gen_range(0.0..0.5),
                lambda: rng.gen_range(0.05..1.0),
            };
            let classes = groups * 2;
            let e = store.add("embeddings", randn(&[ids.len(), d], &mut rng));
            let w = store.add("class_weights", randn(&[classes, d], &mut rng));
            grad_check_piecewise(&mut store, eps, |g| {
                let (e, w) = (g.param(e), g.param(w));
                Ok(record_total_loss(g, e, w, &ids, &gs, &cfg)?.total)
            })
        }
        CheckedOp::Network => {
            let nd = rng.gen_range(2..=4);
            let config = NetworkConfig {
                preset,
                image_size: 8,
                embedding_dim: 4,
                nd,
                placement: Placement::Automatic,
                spatial_attention: true,
                ..NetworkConfig::default()
            };
            let mut net = Network::new(config, rng.gen())?;
            // Move masks and attention away from their symmetric start.
            for (_, p) in net.params_mut().iter_mut() {
                if p.name.ends_with(".masks") || p.name.ends_with(".maps") || p.name.ends_with(".weights") {
                    for v in p.value.data_mut() {
                        *v += 0.3 * rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let image = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())?;
            let group = rng.gen_range(0..nd);
            let seed_rng = rng.gen::<u64>();
            let mut store = net.params().clone();
            let net = &net;
            grad_check_piecewise(&mut store, eps, |g| {
                let mut r = stream_rng(seed_rng, 0, 0);
                let x = g.input(image.clone());
                let e = net.forward(g, x, group)?;
                project(g, e, &mut r)
            })
        }
    }
}

/// Runs `seeds` configurations of every op in `ops`.
pub fn gradcheck_suite(ops: &[CheckedOp], seeds: u64, eps: f64, preset: Preset) -> Result<Vec<OpCheck>> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    ops.iter()
        .map(|&op| {
            let mut worst = (0.0, 0);
            let (mut checked, mut skipped) = (0, 0);
            for seed in 0..seeds {
                let r = check_once(op, seed, eps, preset)?;
                if r.max_error > worst.0 || r.max_error.is_nan() {
                    worst = (r.max_error, seed);
                }
                checked += r.checked;
                skipped += r.skipped;
            }
            Ok(OpCheck {
                op,
                configs: seeds as usize,
                max_error: worst.0,
                worst_seed: worst.1,
                checked_entries: checked,
                skipped_entries: skipped,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_configs() {
        let report = gradcheck_suite(&CheckedOp::ALL, 5, 1e-5, Preset::Tiny).unwrap();
        for r in &report {
            assert!(r.max_error < 1e-4, "{} max error {:e} at seed {}", r.op.name(), r.max_error, r.worst_seed);
            assert!(r.skipped_entries * 20 < r.checked_entries, "{}: {} skipped", r.op.name(), r.skipped_entries);
        }
    }

    #[test]
    fn rejects_zero_seeds() {
        assert!(gradcheck_suite(&CheckedOp::ALL, 0, 1e-5, Preset::Tiny).is_err());
    }
}
