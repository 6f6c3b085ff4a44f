//! Forward and backward kernels for the primitive operations.
//!
//! Convolution is cross-correlation (no kernel flip), lowered to a matrix
//! product through an im2col buffer.

use super::Tensor;
use crate::error::{Error, Result};

/// Norm below which a vector cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub ic: usize,
    pub ih: usize,
    pub iw: usize,
    pub kc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected ic x ih x iw input and kc x ic x kh x kw kernel, got {input:?} and {kernel:?}"),
            ));
        }
        let (ic, ih, iw) = (input[0], input[1], input[2]);
        let (kc, kic, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if ic != kic {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ic} channels but kernel expects {kic}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > ih + 2 * pad || kw > iw + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", ih + 2 * pad, iw + 2 * pad),
            ));
        }
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        Ok(Self {
            ic,
            ih,
            iw,
            kc,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn out_sites(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate sampled by output site `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.ih as isize || x >= self.iw as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// C = A * B (+ beta * C) for row-major A (m x k) and B (k x n); either
/// operand may be supplied transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let sites = g.out_sites();
    let mut cols = vec![0.0; g.patch_len() * sites];
    for c in 0..g.ic {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * sites..(row + 1) * sites];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.ow + ox] = input[(c * g.ih + y) * g.iw + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let sites = g.out_sites();
    let mut out = vec![0.0; g.ic * g.ih * g.iw];
    for c in 0..g.ic {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * sites..(row + 1) * sites];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            out[(c * g.ih + y) * g.iw + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of an `ic x ih x iw` input with a `kc x ic x kh x kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.kc * g.out_sites()];
    gemm(
        g.kc,
        g.patch_len(),
        g.out_sites(),
        kernel.data(),
        false,
        &cols,
        false,
        &mut out,
        0.0,
    );
    Tensor::new(vec![g.kc, g.oh, g.ow], out)
}

/// Gradients of `conv2d` with respect to input (if requested) and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != [g.kc, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient shape {:?} != [{}, {}, {}]", grad_out.shape(), g.kc, g.oh, g.ow),
        ));
    }
    let cols = im2col(input.data(), &g);
    let mut grad_kernel = vec![0.0; kernel.numel()];
    // dK = dY (kc x sites) * cols^T (sites x patch)
    gemm(
        g.kc,
        g.out_sites(),
        g.patch_len(),
        grad_out.data(),
        false,
        &cols,
        true,
        &mut grad_kernel,
        0.0,
    );
    let grad_input = if need_input_grad {
        let mut grad_cols = vec![0.0; cols.len()];
        // dcols = K^T (patch x kc) * dY (kc x sites)
        gemm(
            g.patch_len(),
            g.kc,
            g.out_sites(),
            kernel.data(),
            true,
            grad_out.data(),
            false,
            &mut grad_cols,
            0.0,
        );
        Some(Tensor::new(input.shape().to_vec(), col2im(&grad_cols, &g))?)
    } else {
        None
    };
    Ok((grad_input, Tensor::new(kernel.shape().to_vec(), grad_kernel)?))
}

/// `weight (m x n) * input (n) + bias (m)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 2 || input.numel() != weight.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("weight {:?} cannot multiply input {:?}", weight.shape(), input.shape()),
        ));
    }
    let m = weight.shape()[0];
    if let Some(b) = bias {
        if b.numel() != m {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, expected {m}", b.numel()),
            ));
        }
    }
    let out: Vec<f64> = (0..m)
        .map(|r| super::dot(weight.row(r), input.data()) + bias.map_or(0.0, |b| b.data()[r]))
        .collect();
    Tensor::new(vec![m], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    let go = grad_out.data();
    let x = input.data();
    let mut d_input = vec![0.0; n];
    let mut d_weight = vec![0.0; m * n];
    for r in 0..m {
        let w = weight.row(r);
        for c in 0..n {
            d_input[c] += w[c] * go[r];
            d_weight[r * n + c] = go[r] * x[c];
        }
    }
    (
        Tensor::new(input.shape().to_vec(), d_input).expect("input shape"),
        Tensor::new(vec![m, n], d_weight).expect("weight shape"),
        grad_out.clone(),
    )
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::Sigmoid => sigmoid_scalar(x),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn pointwise(input: &Tensor, f: Pointwise) -> Tensor {
    input.map(|x| f.apply(x))
}

pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    let norm = input.norm();
    if norm <= NORM_EPS {
        return Err(Error::DegenerateVector { norm, eps: NORM_EPS });
    }
    Ok(input.map(|x| x / norm))
}

/// Gradient of `x / |x|`: `(g - y (y . g)) / |x|`.
pub fn l2_normalize_backward(input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
    let norm = input.norm();
    let proj = super::dot(output.data(), grad_out.data());
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| (g - y * proj) / norm)
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_diagonal_kernel() {
        let out = conv2d(&t(&[1, 2, 2], &[1., 2., 3., 4.]), &t(&[1, 1, 2, 2], &[1., 0., 0., 1.]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv2d_identity_and_zero_kernel() {
        let out = conv2d(&t(&[1, 1, 1], &[7.]), &t(&[1, 1, 1, 1], &[1.]), 1, 0).unwrap();
        assert_eq!(out.data(), &[7.0]);
        let input = t(&[2, 3, 3], &(0..18).map(|v| v as f64 - 4.0).collect::<Vec<_>>());
        let zero = conv2d(&input, &Tensor::zeros(&[3, 2, 3, 3]), 1, 1).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_output_size() {
        let g = ConvGeometry::new(&[3, 7, 6], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (4, 3));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let err = conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"));
        assert!(conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 1, 1]), 0, 0).is_err());
    }

    #[test]
    fn linear_examples() {
        let id = linear(&Tensor::vector(&[1., 1.]), &t(&[2, 2], &[1., 0., 0., 1.]), None).unwrap();
        assert_eq!(id.data(), &[1., 1.]);
        let constant = linear(&Tensor::vector(&[2., 3.]), &t(&[1, 2], &[0., 0.]), Some(&Tensor::vector(&[5.]))).unwrap();
        assert_eq!(constant.data(), &[5.]);
        let dotp = linear(&Tensor::vector(&[1., 2.]), &t(&[1, 2], &[3., 4.]), None).unwrap();
        assert_eq!(dotp.data(), &[11.]);
        assert!(linear(&Tensor::vector(&[1., 2., 3.]), &t(&[1, 2], &[3., 4.]), None).is_err());
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(Pointwise::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Pointwise::Relu.apply(-1.0), 0.0);
        assert_abs_diff_eq!(Pointwise::Sigmoid.apply(2.0), 0.880797, epsilon = 1e-6);
        assert!(Pointwise::Sigmoid.apply(-800.0) >= 0.0);
        assert!(Pointwise::Sigmoid.apply(800.0) <= 1.0);
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&Tensor::vector(&[3., 4.])).unwrap();
        assert_abs_diff_eq!(n.data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.data()[1], 0.8, epsilon = 1e-15);
        let axis = l2_normalize(&Tensor::vector(&[2., 0., 0.])).unwrap();
        assert_eq!(axis.data(), &[1., 0., 0.]);
        let unit = Tensor::vector(&[0.6, 0.8]);
        assert!(l2_normalize(&unit).unwrap().max_abs_diff(&unit) < 1e-15);
        assert!(matches!(
            l2_normalize(&Tensor::vector(&[0.0, 1e-14])),
            Err(Error::DegenerateVector { .. })
        ));
    }
}
