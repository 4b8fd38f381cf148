//! 2-D cross-correlation lowered to GEMM through an im2col buffer.

use crate::error::{ensure_arg, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve<T: Real>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (cin, h, w) = input.chw()?;
        ensure_arg!(
            weights.shape().len() == 4,
            "conv weights must be Cout×Cin×kh×kw, got {:?}",
            weights.shape()
        );
        let (cout, wcin, kh, kw) = (
            weights.shape()[0],
            weights.shape()[1],
            weights.shape()[2],
            weights.shape()[3],
        );
        ensure_arg!(
            wcin == cin,
            "conv input has {cin} channels but weights expect {wcin}"
        );
        ensure_arg!(stride >= 1, "conv stride must be at least 1");
        ensure_arg!(
            kh <= h + 2 * pad && kw <= w + 2 * pad,
            "kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        );
        Ok(Self {
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let positions = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    for ci in 0..g.in_channels {
        let plane = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = g.source(ox, kj, g.width) {
                            dst[oy * g.out_w + ox] = plane[sy * g.width + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let positions = g.positions();
    let mut out = vec![T::zero(); g.in_channels * g.height * g.width];
    for ci in 0..g.in_channels {
        let plane = &mut out[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = g.source(ox, kj, g.width) {
                            plane[sy * g.width + sx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(input, weights, stride, pad)?;
    ensure_arg!(
        bias.len() == g.out_channels,
        "conv bias has {} entries for {} output channels",
        bias.len(),
        g.out_channels
    );
    let positions = g.positions();
    let cols = im2col(input.data(), &g);
    let mut out = vec![T::zero(); g.out_channels * positions];
    for (co, &b) in bias.iter().enumerate() {
        out[co * positions..(co + 1) * positions].fill(b);
    }
    gemm(
        g.out_channels,
        g.patch_len(),
        positions,
        weights.data(),
        Layout::Normal,
        &cols,
        Layout::Normal,
        &mut out,
        true,
    );
    Tensor::new(vec![g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

fn check_grad_output<T: Real>(g: &ConvGeometry, grad_output: &Tensor<T>) -> Result<()> {
    ensure_arg!(
        grad_output.shape() == [g.out_channels, g.out_h, g.out_w],
        "conv grad_output shape {:?} does not match forward output {:?}",
        grad_output.shape(),
        [g.out_channels, g.out_h, g.out_w]
    );
    Ok(())
}

/// Adjoint of the forward map with respect to the input only.
pub fn conv2d_backward_input<T: Real>(
    input_shape: &[usize],
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let g = ConvGeometry::resolve(&probe, weights, stride, pad)?;
    check_grad_output(&g, grad_output)?;
    let mut gcols = vec![T::zero(); g.patch_len() * g.positions()];
    gemm(
        g.patch_len(),
        g.out_channels,
        g.positions(),
        weights.data(),
        Layout::Transposed,
        grad_output.data(),
        Layout::Normal,
        &mut gcols,
        false,
    );
    Tensor::new(input_shape.to_vec(), col2im(&gcols, &g))
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::resolve(input, weights, stride, pad)?;
    check_grad_output(&g, grad_output)?;
    let positions = g.positions();
    let grad_input = conv2d_backward_input(input.shape(), weights, grad_output, stride, pad)?;

    let cols = im2col(input.data(), &g);
    let mut grad_w = vec![T::zero(); g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        positions,
        g.patch_len(),
        grad_output.data(),
        Layout::Normal,
        &cols,
        Layout::Transposed,
        &mut grad_w,
        false,
    );
    let grad_bias = grad_output
        .data()
        .chunks_exact(positions)
        .map(|c| c.iter().copied().sum())
        .collect();
    Ok(ConvGrads {
        input: grad_input,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: grad_bias,
    })
}
