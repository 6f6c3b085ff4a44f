//! Mini-batch gradient accumulation and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

/// Samples per work item. Chunk boundaries never depend on the execution
/// mode, so sums are reduced in the same order either way.
pub const CHUNK: usize = 4;

pub type GradSlots = Vec<Option<Tensor>>;

fn add_slots(acc: &mut GradSlots, other: GradSlots) {
    for (a, g) in acc.iter_mut().zip(other) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Sums the scalar returned by `build(graph, i)` over `i in 0..n` and the
/// gradients of that scalar with respect to every parameter.
pub fn batch_gradients<F>(params: &ParamStore, n: usize, exec: Execution, build: F) -> Result<(f64, GradSlots)>
where
    F: Fn(&mut Graph<'_>, usize) -> Result<NodeId> + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Result<(f64, GradSlots)>> = map_indexed(chunks, exec, |c| {
        let mut value = 0.0;
        let mut slots: GradSlots = vec![None; params.len()];
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let mut graph = Graph::new(params);
            let out = build(&mut graph, i)?;
            value += graph.value(out).item();
            graph.backward(out)?.accumulate_into(&mut slots);
        }
        Ok((value, slots))
    });
    let mut total = 0.0;
    let mut grads: GradSlots = vec![None; params.len()];
    for p in partial {
        let (v, g) = p?;
        total += v;
        add_slots(&mut grads, g);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1); weight_decay and clip_norm must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
    /// Parameters exempt from weight decay.
    no_decay: Vec<bool>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore, no_decay: impl Fn(&str) -> bool) -> Self {
        Self {
            config,
            velocity: params.iter().map(|(_, p)| Tensor::zeros_like(&p.value)).collect(),
            no_decay: params.iter().map(|(_, p)| no_decay(&p.name)).collect(),
        }
    }

    /// `v = mu * v + (g + wd * w); w -= lr * v`. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradSlots, lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let wd = if self.no_decay[i] { 0.0 } else { self.config.weight_decay };
            let v = self.velocity[i].data_mut();
            let grad = grads[i].as_ref().map(Tensor::data);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[k] * clip) + wd * *w;
                v[k] = self.config.momentum * v[k] + g;
                *w -= lr * v[k];
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut store = ParamStore::default();
        store.add("w", Tensor::vector(&[1.0, -2.0]));
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: 0.0,
        };
        let mut opt = Sgd::new(cfg, &store, |_| false);
        opt.step(&mut store, &vec![Some(Tensor::vector(&[0.5, 0.5]))], 0.1);
        assert_eq!(store.iter().next().unwrap().1.value.data(), &[0.95, -2.05]);
    }

    #[test]
    fn chunked_sum_matches_sequential() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::vector(&[0.3, -0.7, 1.1]));
        let build = |g: &mut Graph<'_>, i: usize| {
            let p = g.param(w);
            let s = g.scale(p, i as f64 + 1.0)?;
            g.sum(s)
        };
        let (a, ga) = batch_gradients(&store, 11, Execution::Sequential, build).unwrap();
        let (b, gb) = batch_gradients(&store, 11, Execution::Parallel, build).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
        assert_eq!(ga[0].as_ref().unwrap().data(), &[66.0, 66.0, 66.0]);
    }
}
