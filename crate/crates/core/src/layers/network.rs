//! Residual CNN backbone with optional group-adaptive parts.
//!
//! Layout: input centering, a 3x3 stem, `units` residual units of `blocks`
//! basic blocks (conv-relu-conv, shortcut add, relu) and a linear embedding
//! head over the flattened last feature map. The first block of every unit after the first
//! downsamples by 2. Channel and spatial attention act on unit outputs,
//! after the final activation of the unit's last block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adaptive::{graph_channel_attention, graph_masked_kernel, graph_spatial_attention};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Where group-adaptive parts are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Every conv layer and unit output starts adaptive; automation prunes.
    Automatic,
    /// Both convs of the first block of each unit are adaptive; channel
    /// attention follows the last block of each unit.
    Manual,
    /// Nothing is group dependent.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 2 units x 1 block, widths 4/8. Unit tests and gradient checks.
    Tiny,
    /// 4 units x 1 block, widths 8/16/32/64.
    Small,
    /// 4 units x 2 blocks, widths 16/32/64/128.
    Medium,
    /// 4 units x 3 blocks, widths 16/32/64/128.
    Large,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected tiny, small, medium or large)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    pub fn blocks_per_unit(self) -> usize {
        match self {
            Preset::Tiny | Preset::Small => 1,
            Preset::Medium => 2,
            Preset::Large => 3,
        }
    }

    pub fn widths(self) -> &'static [usize] {
        match self {
            Preset::Tiny => &[4, 8],
            Preset::Small => &[8, 16, 32, 64],
            Preset::Medium | Preset::Large => &[16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub in_channels: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    pub embedding_dim: usize,
    pub nd: usize,
    pub placement: Placement,
    pub adaptive_kernels: bool,
    pub channel_attention: bool,
    pub spatial_attention: bool,
    /// Scale applied to the He initialization of each block's second conv.
    pub residual_init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Medium,
            in_channels: 1,
            image_size: 32,
            embedding_dim: 64,
            nd: 4,
            placement: Placement::Automatic,
            adaptive_kernels: true,
            channel_attention: true,
            spatial_attention: false,
            residual_init_scale: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be > 0".into()));
        }
        if self.nd == 0 {
            return Err(Error::Config("nd must be >= 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if !(self.residual_init_scale > 0.0) {
            return Err(Error::Config("residual_init_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial side of the last unit's feature map.
    pub fn feature_size(&self) -> usize {
        let units = self.preset.widths().len();
        (1..units).fold(self.image_size, |s, _| s.div_ceil(2))
    }

    /// Whether any component depends on the group label.
    pub fn is_group_dependent(&self) -> bool {
        self.placement != Placement::None && (self.adaptive_kernels || self.channel_attention)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Standard,
    AdaptiveConv,
    AdaptiveAttention,
    SpatialAttention,
}

/// Automation bookkeeping for one layer that carries a per-group bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub kind: LayerKind,
    pub shared_flag: bool,
    pub similarity_history: Vec<(u64, f64)>,
}

impl LayerState {
    fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            shared_flag: false,
            similarity_history: Vec::new(),
        }
    }

    pub fn record(&mut self, step: u64, mean_similarity: f64) {
        if let Some(&(last, _)) = self.similarity_history.last() {
            assert!(step > last, "similarity history must increase in step");
        }
        self.similarity_history.push((step, mean_similarity));
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: ParamId,
    pub masks: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: usize,
    conv2: usize,
    shortcut: Option<usize>,
}

#[derive(Debug, Clone)]
struct Unit {
    blocks: Vec<Block>,
    channel: Option<ParamId>,
    spatial: Option<ParamId>,
}

/// A per-group bank subject to automation.
#[derive(Debug, Clone)]
pub struct AdaptiveLayer {
    pub name: String,
    pub param: ParamId,
    pub state: LayerState,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    convs: Vec<ConvLayer>,
    stem: usize,
    units: Vec<Unit>,
    head_weight: ParamId,
    head_bias: ParamId,
    adaptive: Vec<AdaptiveLayer>,
}

/// Serialized under the `arch` key of a checkpoint index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: String,
    pub preset: String,
    pub nd: usize,
    pub placement: Placement,
    pub config: NetworkConfig,
    pub layers: Vec<String>,
    pub shared_flags: Vec<bool>,
}

pub const ARCH_KIND: &str = "gac_network";
/// Subtracted from every pixel before the stem.
pub const INPUT_CENTER: f64 = 0.5;

fn he_normal(shape: &[usize], fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = scale * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl Network {
    /// Builds the backbone with freshly initialized weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = config.nd;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut adaptive = Vec::new();

        let kernel_adaptive = config.adaptive_kernels && config.placement != Placement::None;
        let mut add_conv = |params: &mut ParamStore,
                            adaptive: &mut Vec<AdaptiveLayer>,
                            rng: &mut ChaCha8Rng,
                            name: String,
                            (kc, ic, k): (usize, usize, usize),
                            stride: usize,
                            with_masks: bool,
                            init_scale: f64|
         -> usize {
            let kernel = params.add(format!("{name}.kernel"), he_normal(&[kc, ic, k, k], ic * k * k, init_scale, rng));
            let masks = with_masks.then(|| {
                let id = params.add(format!("{name}.masks"), Tensor::ones(&[nd, ic, k, k]));
                adaptive.push(AdaptiveLayer {
                    name: name.clone(),
                    param: id,
                    state: LayerState::new(LayerKind::AdaptiveConv),
                });
                id
            });
            convs.push(ConvLayer {
                name,
                kernel,
                masks,
                stride,
                pad: k / 2,
            });
            convs.len() - 1
        };

        let widths = config.preset.widths();
        let auto = config.placement == Placement::Automatic;
        let stem = add_conv(
            &mut params,
            &mut adaptive,
            &mut rng,
            "stem".into(),
            (widths[0], config.in_channels, 3),
            1,
            kernel_adaptive && auto,
            1.0,
        );

        let mut units = Vec::new();
        let mut in_ch = widths[0];
        for (u, &width) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.preset.blocks_per_unit() {
                let stride = if u > 0 && b == 0 { 2 } else { 1 };
                let masked = kernel_adaptive && (auto || b == 0);
                let prefix = format!("unit{u}.block{b}");
                let conv1 = add_conv(
                    &mut params,
                    &mut adaptive,
                    &mut rng,
                    format!("{prefix}.conv1"),
                    (width, in_ch, 3),
                    stride,
                    masked,
                    1.0,
                );
                let conv2 = add_conv(
                    &mut params,
                    &mut adaptive,
                    &mut rng,
                    format!("{prefix}.conv2"),
                    (width, width, 3),
                    1,
                    masked,
                    config.residual_init_scale,
                );
                let shortcut = (stride != 1 || in_ch != width).then(|| {
                    add_conv(
                        &mut params,
                        &mut adaptive,
                        &mut rng,
                        format!("{prefix}.shortcut"),
                        (width, in_ch, 1),
                        stride,
                        false,
                        1.0,
                    )
                });
                blocks.push(Block { conv1, conv2, shortcut });
                in_ch = width;
            }

            let channel = (config.channel_attention && config.placement != Placement::None).then(|| {
                let name = format!("unit{u}.attention");
                let id = params.add(format!("{name}.maps"), Tensor::zeros(&[nd, width]));
                adaptive.push(AdaptiveLayer {
                    name,
                    param: id,
                    state: LayerState::new(LayerKind::AdaptiveAttention),
                });
                id
            });
            let spatial = config
                .spatial_attention
                .then(|| params.add(format!("unit{u}.spatial.weights"), Tensor::zeros(&[1, width, 1, 1])));
            units.push(Unit {
                blocks,
                channel,
                spatial,
            });
        }

        let emb = config.embedding_dim;
        let side = config.feature_size();
        let flat = in_ch * side * side;
        let head_weight = params.add("head.weight", he_normal(&[emb, flat], flat, 1.0, &mut rng));
        let head_bias = params.add("head.bias", Tensor::zeros(&[emb]));

        // Banks of a single group are permanently shared.
        if nd == 1 {
            for layer in &mut adaptive {
                layer.state.shared_flag = true;
            }
        }

        Ok(Self {
            config,
            params,
            convs,
            stem,
            units,
            head_weight,
            head_bias,
            adaptive,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn nd(&self) -> usize {
        self.config.nd
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn adaptive_layers(&self) -> &[AdaptiveLayer] {
        &self.adaptive
    }

    pub fn adaptive_layers_mut(&mut self) -> &mut [AdaptiveLayer] {
        &mut self.adaptive
    }

    /// Split borrow used by the automation controller.
    pub fn adaptive_parts_mut(&mut self) -> (&mut ParamStore, &mut [AdaptiveLayer]) {
        (&mut self.params, &mut self.adaptive)
    }

    pub fn attention_bank_count(&self) -> usize {
        self.units.iter().filter(|u| u.channel.is_some()).count()
    }

    pub fn adaptive_conv_count(&self) -> usize {
        self.convs.iter().filter(|c| c.masks.is_some()).count()
    }

    pub fn spatial_attention_count(&self) -> usize {
        self.units.iter().filter(|u| u.spatial.is_some()).count()
    }

    fn conv(&self, graph: &mut Graph<'_>, x: NodeId, layer: usize, group: usize) -> Result<NodeId> {
        let conv = &self.convs[layer];
        let base = graph.param(conv.kernel);
        let kernel = match conv.masks {
            Some(m) => {
                let masks = graph.param(m);
                graph_masked_kernel(graph, base, masks, group)?
            }
            None => base,
        };
        graph.conv2d(x, kernel, conv.stride, conv.pad)
    }

    /// Records the forward pass for one image and returns the raw
    /// (unnormalized) embedding node.
    pub fn forward(&self, graph: &mut Graph<'_>, image: NodeId, group: usize) -> Result<NodeId> {
        if group >= self.config.nd {
            return Err(Error::GroupOutOfRange {
                group,
                nd: self.config.nd,
            });
        }
        let expected = [self.config.in_channels, self.config.image_size, self.config.image_size];
        if graph.value(image).shape() != expected {
            return Err(Error::shape(
                "network input",
                format!("image {:?}, expected {:?}", graph.value(image).shape(), expected),
            ));
        }
        let center = graph.input(Tensor::full(&expected, -INPUT_CENTER));
        let image = graph.add(image, center)?;
        let x = self.conv(graph, image, self.stem, group)?;
        let mut x = graph.relu(x)?;
        for unit in &self.units {
            for block in &unit.blocks {
                let h = self.conv(graph, x, block.conv1, group)?;
                let h = graph.relu(h)?;
                let h = self.conv(graph, h, block.conv2, group)?;
                let skip = match block.shortcut {
                    Some(s) => self.conv(graph, x, s, group)?,
                    None => x,
                };
                let sum = graph.add(h, skip)?;
                x = graph.relu(sum)?;
            }
            if let Some(maps) = unit.channel {
                let maps = graph.param(maps);
                x = graph_channel_attention(graph, x, maps, group)?;
            }
            if let Some(w) = unit.spatial {
                let w = graph.param(w);
                x = graph_spatial_attention(graph, x, w)?;
            }
        }
        let (w, b) = (graph.param(self.head_weight), graph.param(self.head_bias));
        graph.linear(x, w, Some(b))
    }

    /// Raw embedding of one image.
    pub fn embed(&self, image: &Tensor, group: usize) -> Result<Tensor> {
        let mut graph = Graph::new(&self.params);
        let x = graph.input(image.clone());
        let out = self.forward(&mut graph, x, group)?;
        Ok(graph.value(out).clone())
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            kind: ARCH_KIND.into(),
            preset: self.config.preset.name().into(),
            nd: self.config.nd,
            placement: self.config.placement,
            config: self.config.clone(),
            layers: self.adaptive.iter().map(|l| l.name.clone()).collect(),
            shared_flags: self.adaptive.iter().map(|l| l.state.shared_flag).collect(),
        }
    }

    /// All parameters plus `extra` tensors, with the architecture under `arch`.
    pub fn to_checkpoint(&self, extra: &[(&str, &Tensor)]) -> Result<Checkpoint> {
        let mut tensors = indexmap::IndexMap::new();
        for (_, p) in self.params.iter() {
            tensors.insert(p.name.clone(), p.value.clone());
        }
        for (name, t) in extra {
            tensors.insert((*name).to_string(), (*t).clone());
        }
        Ok(Checkpoint {
            arch: Some(serde_json::to_value(self.arch())?),
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_value(
            ckpt.arch
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no arch entry".into()))?,
        )?;
        if arch.kind != ARCH_KIND {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a '{}', not a {ARCH_KIND}",
                arch.kind
            )));
        }
        let mut net = Network::new(arch.config.clone(), 0)?;
        if net.adaptive.len() != arch.shared_flags.len() {
            return Err(Error::Checkpoint("adaptive layer count does not match arch".into()));
        }
        for (_, p) in net.params.iter_mut() {
            let stored = ckpt.get(&p.name)?;
            if stored.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.clone();
        }
        for (layer, &flag) in net.adaptive.iter_mut().zip(&arch.shared_flags) {
            layer.state.shared_flag = flag;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(placement: Placement) -> NetworkConfig {
        NetworkConfig {
            preset: Preset::Tiny,
            image_size: 8,
            embedding_dim: 8,
            placement,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn manual_medium_matches_unit_layout() {
        let net = Network::new(
            NetworkConfig {
                placement: Placement::Manual,
                ..NetworkConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(net.attention_bank_count(), 4);
        assert_eq!(net.adaptive_conv_count(), 8);
    }

    #[test]
    fn automatic_makes_every_block_conv_adaptive() {
        let net = Network::new(NetworkConfig::default(), 0).unwrap();
        // stem + 4 units x 2 blocks x 2 convs
        assert_eq!(net.adaptive_conv_count(), 17);
        assert_eq!(net.attention_bank_count(), 4);
        let none = Network::new(
            NetworkConfig {
                placement: Placement::None,
                ..NetworkConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(none.adaptive_layers().len(), 0);
    }

    #[test]
    fn none_mode_ignores_group() {
        let net = Network::new(cfg(Placement::None), 1).unwrap();
        let img = Tensor::full(&[1, 8, 8], 0.3);
        let e0 = net.embed(&img, 0).unwrap();
        for g in 1..4 {
            assert_eq!(net.embed(&img, g).unwrap(), e0);
        }
        assert!(net.embed(&img, 4).is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(Preset::parse("huge").is_err());
        assert_eq!(Preset::parse("small").unwrap(), Preset::Small);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = Network::new(cfg(Placement::Automatic), 4).unwrap();
        net.adaptive_layers_mut()[1].state.shared_flag = true;
        let ckpt = net.to_checkpoint(&[]).unwrap();
        let back = Network::from_checkpoint(&ckpt).unwrap();
        let img = Tensor::full(&[1, 8, 8], 0.7);
        assert_eq!(back.embed(&img, 2).unwrap(), net.embed(&img, 2).unwrap());
        assert!(back.adaptive_layers()[1].state.shared_flag);
        assert_eq!(ckpt.numel(), net.params().numel());
    }
}
