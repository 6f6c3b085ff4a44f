//! Group-adaptive building blocks.
//!
//! * Adaptive convolution: group `g` convolves with `base[c] * masks[g]`,
//!   one mask per group shared across the output channels.
//! * Adaptive channel attention: channel `c` of a feature map is scaled by
//!   `sigmoid(maps[g][c])`, uniformly over space.
//! * Spatial attention: the feature map is gated by the sigmoid of a learned
//!   1x1 convolution, broadcast over channels.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, sigmoid_scalar, Pointwise};
use crate::tensor::{CustomOp, Graph, NodeId, Tensor};

/// Per-group kernel masks for one convolution layer (`nd x ic x kh x kw`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMaskBank {
    pub masks: Tensor,
}

impl KernelMaskBank {
    /// All-ones masks, so the layer starts out identical to its base kernel.
    pub fn new(nd: usize, ic: usize, kh: usize, kw: usize) -> Result<Self> {
        if nd == 0 {
            return Err(Error::InvalidArgument("group count must be >= 1".into()));
        }
        Ok(Self {
            masks: Tensor::ones(&[nd, ic, kh, kw]),
        })
    }

    pub fn from_tensor(masks: Tensor) -> Result<Self> {
        if masks.rank() != 4 {
            return Err(Error::shape("kernel mask bank", format!("expected rank 4, got {:?}", masks.shape())));
        }
        Ok(Self { masks })
    }

    pub fn nd(&self) -> usize {
        self.masks.shape()[0]
    }
}

/// Per-group channel attention logits for one layer (`nd x kc`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank {
    pub maps: Tensor,
}

impl AttentionBank {
    /// All-zero logits: every channel of every group starts at gain 0.5.
    pub fn new(nd: usize, kc: usize) -> Result<Self> {
        if nd == 0 {
            return Err(Error::InvalidArgument("group count must be >= 1".into()));
        }
        Ok(Self {
            maps: Tensor::zeros(&[nd, kc]),
        })
    }

    pub fn from_tensor(maps: Tensor) -> Result<Self> {
        if maps.rank() != 2 {
            return Err(Error::shape("attention bank", format!("expected rank 2, got {:?}", maps.shape())));
        }
        Ok(Self { maps })
    }

    pub fn nd(&self) -> usize {
        self.maps.shape()[0]
    }
}

fn check_group(group: usize, nd: usize) -> Result<()> {
    if group >= nd {
        Err(Error::GroupOutOfRange { group, nd })
    } else {
        Ok(())
    }
}

/// `base[c] * masks[group]` for every output channel `c`.
pub struct MaskedKernel {
    pub group: usize,
}

impl CustomOp for MaskedKernel {
    fn name(&self) -> &'static str {
        "masked_kernel"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (base, masks) = (inputs[0], inputs[1]);
        if base.rank() != 4 || masks.rank() != 4 || base.shape()[1..] != masks.shape()[1..] {
            return Err(Error::shape(
                "make_adaptive_kernel",
                format!("base {:?} incompatible with masks {:?}", base.shape(), masks.shape()),
            ));
        }
        check_group(self.group, masks.shape()[0])?;
        let mask = masks.row(self.group);
        let mut out = base.clone();
        for c in 0..base.shape()[0] {
            for (w, m) in out.row_mut(c).iter_mut().zip(mask) {
                *w *= m;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (base, masks) = (inputs[0], inputs[1]);
        let mask = masks.row(self.group);
        let mut d_base = grad_out.clone();
        let mut d_masks = Tensor::zeros_like(masks);
        for c in 0..base.shape()[0] {
            for (w, m) in d_base.row_mut(c).iter_mut().zip(mask) {
                *w *= m;
            }
            let dm = d_masks.row_mut(self.group);
            for ((acc, g), b) in dm.iter_mut().zip(grad_out.row(c)).zip(base.row(c)) {
                *acc += g * b;
            }
        }
        vec![Some(d_base), Some(d_masks)]
    }
}

/// `feature[c] * sigmoid(maps[group][c])`.
pub struct ChannelGain {
    pub group: usize,
}

impl CustomOp for ChannelGain {
    fn name(&self) -> &'static str {
        "channel_gain"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (feature, maps) = (inputs[0], inputs[1]);
        if feature.rank() != 3 || maps.rank() != 2 || feature.shape()[0] != maps.shape()[1] {
            return Err(Error::shape(
                "adaptive_attention",
                format!("feature {:?} has channels incompatible with maps {:?}", feature.shape(), maps.shape()),
            ));
        }
        check_group(self.group, maps.shape()[0])?;
        let mut out = feature.clone();
        for (c, &logit) in maps.row(self.group).iter().enumerate() {
            let gain = sigmoid_scalar(logit);
            out.row_mut(c).iter_mut().for_each(|v| *v *= gain);
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (feature, maps) = (inputs[0], inputs[1]);
        let mut d_feature = grad_out.clone();
        let mut d_maps = Tensor::zeros_like(maps);
        for (c, &logit) in maps.row(self.group).iter().enumerate() {
            let gain = sigmoid_scalar(logit);
            d_feature.row_mut(c).iter_mut().for_each(|v| *v *= gain);
            let dg: f64 = crate::tensor::dot(grad_out.row(c), feature.row(c));
            d_maps.row_mut(self.group)[c] = dg * gain * (1.0 - gain);
        }
        vec![Some(d_feature), Some(d_maps)]
    }
}

/// `feature[c, y, x] * gate[0, y, x]`.
pub struct SpatialProduct;

impl CustomOp for SpatialProduct {
    fn name(&self) -> &'static str {
        "spatial_product"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (feature, gate) = (inputs[0], inputs[1]);
        if feature.rank() != 3 || gate.shape() != [1, feature.shape()[1], feature.shape()[2]] {
            return Err(Error::shape(
                "spatial_attention",
                format!("gate {:?} does not match feature {:?}", gate.shape(), feature.shape()),
            ));
        }
        let mut out = feature.clone();
        for c in 0..feature.shape()[0] {
            for (v, g) in out.row_mut(c).iter_mut().zip(gate.data()) {
                *v *= g;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (feature, gate) = (inputs[0], inputs[1]);
        let mut d_feature = grad_out.clone();
        let mut d_gate = Tensor::zeros_like(gate);
        for c in 0..feature.shape()[0] {
            for (v, g) in d_feature.row_mut(c).iter_mut().zip(gate.data()) {
                *v *= g;
            }
            for ((acc, g), f) in d_gate.data_mut().iter_mut().zip(grad_out.row(c)).zip(feature.row(c)) {
                *acc += g * f;
            }
        }
        vec![Some(d_feature), Some(d_gate)]
    }
}

pub fn graph_masked_kernel(graph: &mut Graph<'_>, base: NodeId, masks: NodeId, group: usize) -> Result<NodeId> {
    graph.custom(&[base, masks], Box::new(MaskedKernel { group }))
}

pub fn graph_channel_attention(graph: &mut Graph<'_>, feature: NodeId, maps: NodeId, group: usize) -> Result<NodeId> {
    graph.custom(&[feature, maps], Box::new(ChannelGain { group }))
}

/// `feature * sigmoid(conv1x1(feature, weights))`, with `weights` of shape `1 x kc x 1 x 1`.
pub fn graph_spatial_attention(graph: &mut Graph<'_>, feature: NodeId, weights: NodeId) -> Result<NodeId> {
    let logits = graph.conv2d(feature, weights, 1, 0)?;
    let gate = graph.sigmoid(logits)?;
    graph.custom(&[feature, gate], Box::new(SpatialProduct))
}

/// Effective kernel used by `group`.
pub fn make_adaptive_kernel(base: &Tensor, bank: &KernelMaskBank, group: usize) -> Result<Tensor> {
    MaskedKernel { group }.forward(&[base, &bank.masks])
}

/// `relu(conv2d(input, make_adaptive_kernel(base, bank, group)))`.
pub fn adaptive_conv_forward(
    input: &Tensor,
    base: &Tensor,
    bank: &KernelMaskBank,
    group: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let kernel = make_adaptive_kernel(base, bank, group)?;
    let out = kernels::conv2d(input, &kernel, stride, pad)?;
    Ok(kernels::pointwise(&out, Pointwise::Relu))
}

pub fn adaptive_attention_forward(feature: &Tensor, bank: &AttentionBank, group: usize) -> Result<Tensor> {
    ChannelGain { group }.forward(&[feature, &bank.maps])
}

pub fn spatial_attention_forward(feature: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if weights.rank() != 4 || weights.shape()[0] != 1 || weights.shape()[2..] != [1, 1] {
        return Err(Error::shape(
            "spatial_attention",
            format!("weights must be 1 x kc x 1 x 1, got {:?}", weights.shape()),
        ));
    }
    let logits = kernels::conv2d(feature, weights, 1, 0)?;
    let gate = kernels::pointwise(&logits, Pointwise::Sigmoid);
    SpatialProduct.forward(&[feature, &gate])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ones_mask_is_identity_and_zero_mask_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random(&[4, 2, 3, 3], &mut rng);
        let ones = KernelMaskBank::new(3, 2, 3, 3).unwrap();
        assert_eq!(make_adaptive_kernel(&base, &ones, 2).unwrap(), base);
        let zeros = KernelMaskBank::from_tensor(Tensor::zeros(&[3, 2, 3, 3])).unwrap();
        assert!(make_adaptive_kernel(&base, &zeros, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_mask_example() {
        let base = Tensor::full(&[1, 1, 2, 2], 2.0);
        let bank = KernelMaskBank::from_tensor(Tensor::new(vec![1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap()).unwrap();
        assert_eq!(make_adaptive_kernel(&base, &bank, 0).unwrap().data(), &[2., 0., 0., 2.]);
        assert!(matches!(
            make_adaptive_kernel(&base, &bank, 1),
            Err(Error::GroupOutOfRange { group: 1, nd: 1 })
        ));
    }

    #[test]
    fn mask_is_shared_across_output_channels() {
        let base = Tensor::ones(&[3, 1, 1, 2]);
        let bank = KernelMaskBank::from_tensor(Tensor::new(vec![2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let k = make_adaptive_kernel(&base, &bank, 1).unwrap();
        assert_eq!(k.data(), &[3., 4., 3., 4., 3., 4.]);
    }

    #[test]
    fn adaptive_conv_reduces_to_standard_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random(&[2, 5, 5], &mut rng);
        let base = random(&[3, 2, 3, 3], &mut rng);
        let bank = KernelMaskBank::new(4, 2, 3, 3).unwrap();
        let reference = kernels::pointwise(&kernels::conv2d(&input, &base, 1, 1).unwrap(), Pointwise::Relu);
        for g in 0..4 {
            let out = adaptive_conv_forward(&input, &base, &bank, g, 1, 1).unwrap();
            assert!(out.max_abs_diff(&reference) <= 1e-12);
        }
    }

    #[test]
    fn distinct_masks_route_groups_differently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(&[2, 5, 5], &mut rng);
        let base = random(&[3, 2, 3, 3], &mut rng);
        let same_rows = random(&[1, 2, 3, 3], &mut rng);
        let mut data = same_rows.data().to_vec();
        data.extend_from_slice(same_rows.data());
        let identical = KernelMaskBank::from_tensor(Tensor::new(vec![2, 2, 3, 3], data).unwrap()).unwrap();
        let a = adaptive_conv_forward(&input, &base, &identical, 0, 1, 1).unwrap();
        let b = adaptive_conv_forward(&input, &base, &identical, 1, 1, 1).unwrap();
        assert_eq!(a, b);

        let distinct = KernelMaskBank::from_tensor(random(&[2, 2, 3, 3], &mut rng)).unwrap();
        let a = adaptive_conv_forward(&input, &base, &distinct, 0, 1, 1).unwrap();
        let b = adaptive_conv_forward(&input, &base, &distinct, 1, 1, 1).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feature = random(&[3, 2, 2], &mut rng);
        let half = adaptive_attention_forward(&feature, &AttentionBank::new(2, 3).unwrap(), 1).unwrap();
        for (h, f) in half.data().iter().zip(feature.data()) {
            assert_eq!(*h, 0.5 * f);
        }

        let saturated = AttentionBank::from_tensor(Tensor::full(&[1, 3], 20.0)).unwrap();
        let out = adaptive_attention_forward(&feature, &saturated, 0).unwrap();
        for (o, f) in out.data().iter().zip(feature.data()) {
            assert!((o / f) >= 1.0 - 1e-8);
        }

        let single = Tensor::new(vec![1, 1, 2], vec![2., 4.]).unwrap();
        let out = adaptive_attention_forward(&single, &AttentionBank::new(1, 1).unwrap(), 0).unwrap();
        assert_eq!(out.data(), &[1., 2.]);

        assert!(adaptive_attention_forward(&single, &AttentionBank::new(1, 3).unwrap(), 0).is_err());
    }

    #[test]
    fn spatial_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feature = random(&[3, 2, 2], &mut rng);
        let out = spatial_attention_forward(&feature, &Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        for (o, f) in out.data().iter().zip(feature.data()) {
            assert_eq!(*o, 0.5 * f);
        }

        let zeros = Tensor::zeros(&[3, 2, 2]);
        let out = spatial_attention_forward(&zeros, &random(&[1, 3, 1, 1], &mut rng)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // 1-channel [[1, -1]] with weight 10: site values 1*s(10) and -1*s(-10).
        let f = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let out = spatial_attention_forward(&f, &Tensor::full(&[1, 1, 1, 1], 10.0)).unwrap();
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert_abs_diff_eq!(out.data()[0], s10, epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[0], 0.9999546, epsilon = 1e-7);
        assert_abs_diff_eq!(out.data()[1], -(1.0 - s10), epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[1], -4.5398e-5, epsilon = 1e-9);

        assert!(spatial_attention_forward(&feature, &Tensor::zeros(&[1, 2, 1, 1])).is_err());
    }
}
