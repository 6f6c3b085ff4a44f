//! Network building blocks and backbone assembly.

pub mod adaptive;
pub mod network;

pub use adaptive::{
    adaptive_attention_forward, adaptive_conv_forward, make_adaptive_kernel, spatial_attention_forward,
    AttentionBank, KernelMaskBank,
};
pub use network::{
    AdaptiveLayer, ArchSpec, LayerKind, LayerState, Network, NetworkConfig, Placement, Preset,
};

/// Builds a freshly initialized network for `config`.
pub fn build_network(config: NetworkConfig, seed: u64) -> crate::Result<Network> {
    Network::new(config, seed)
}
