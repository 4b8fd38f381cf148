//! Forward and backward passes for every layer kind used by the model zoo.

use crate::error::{ensure_arg, Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_backward_input, conv2d_forward};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Tag identifying a layer kind, shared by [`Op`] and [`LayerCache`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool2,
    AvgPool2,
    Dense,
    Flatten,
    AddSkip,
}

/// A layer kind together with the parameters it needs for one call.
#[derive(Debug, Clone, Copy)]
pub enum Op<'a, T> {
    Conv2d {
        weights: &'a Tensor<T>,
        bias: &'a [T],
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    /// `y = W x + b` with `W` of shape `outputs × inputs`.
    Dense {
        weights: &'a Tensor<T>,
        bias: &'a [T],
    },
    Flatten,
    /// Elementwise sum of the input with a second, same-shaped tensor.
    AddSkip { other: &'a Tensor<T> },
}

impl<T> Op<'_, T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Op::Conv2d { .. } => LayerKind::Conv2d,
            Op::Relu => LayerKind::Relu,
            Op::MaxPool2 => LayerKind::MaxPool2,
            Op::AvgPool2 => LayerKind::AvgPool2,
            Op::Dense { .. } => LayerKind::Dense,
            Op::Flatten => LayerKind::Flatten,
            Op::AddSkip { .. } => LayerKind::AddSkip,
        }
    }
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv2d { input: Tensor<T> },
    /// `true` where the forward input was strictly positive.
    Relu { mask: Vec<bool> },
    /// Flat input index of the selected element for every output element.
    MaxPool2 {
        input_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    AvgPool2 { input_shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Flatten { input_shape: Vec<usize> },
    AddSkip,
}

impl<T> LayerCache<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerCache::Conv2d { .. } => LayerKind::Conv2d,
            LayerCache::Relu { .. } => LayerKind::Relu,
            LayerCache::MaxPool2 { .. } => LayerKind::MaxPool2,
            LayerCache::AvgPool2 { .. } => LayerKind::AvgPool2,
            LayerCache::Dense { .. } => LayerKind::Dense,
            LayerCache::Flatten { .. } => LayerKind::Flatten,
            LayerCache::AddSkip => LayerKind::AddSkip,
        }
    }

    /// Hashable summary of the piecewise-linear region (relu masks and
    /// pooling choices). Two inputs with equal patterns share one local
    /// linearization of every layer.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        match self {
            LayerCache::Relu { mask } => {
                out.extend(mask.chunks(32).map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u32, |acc, (i, &b)| acc | ((b as u32) << i))
                }));
            }
            LayerCache::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
}

/// Gradients returned by [`layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub input: Tensor<T>,
    /// Gradient with respect to the second operand of an add-skip layer.
    pub skip: Option<Tensor<T>>,
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

impl<T> LayerGrads<T> {
    fn input_only(input: Tensor<T>) -> Self {
        Self {
            input,
            skip: None,
            weights: None,
            bias: None,
        }
    }
}

fn pool_geometry<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    ensure_arg!(
        h % 2 == 0 && w % 2 == 0,
        "2×2 pooling needs even spatial dims, got {h}×{w}"
    );
    Ok((c, h, w))
}

fn dense_dims<T: Real>(weights: &Tensor<T>, bias: &[T], input: &Tensor<T>) -> Result<(usize, usize)> {
    ensure_arg!(
        weights.shape().len() == 2,
        "dense weights must be outputs×inputs, got {:?}",
        weights.shape()
    );
    let (outputs, inputs) = (weights.shape()[0], weights.shape()[1]);
    ensure_arg!(
        input.shape().len() == 1 && input.len() == inputs,
        "dense layer expects a flat input of length {inputs}, got shape {:?}",
        input.shape()
    );
    ensure_arg!(
        bias.len() == outputs,
        "dense bias has {} entries for {outputs} outputs",
        bias.len()
    );
    Ok((outputs, inputs))
}

pub fn layer_forward<T: Real>(op: Op<'_, T>, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    match op {
        Op::Conv2d {
            weights,
            bias,
            stride,
            pad,
        } => {
            let out = conv2d_forward(input, weights, bias, stride, pad)?;
            Ok((out, LayerCache::Conv2d { input: input.clone() }))
        }
        Op::Relu => {
            let mask: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
            let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
            Ok((out, LayerCache::Relu { mask }))
        }
        Op::MaxPool2 => {
            let (c, h, w) = pool_geometry(input)?;
            let (oh, ow) = (h / 2, w / 2);
            let x = input.data();
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ci in 0..c {
                let base = ci * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + (2 * oy) * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best as u32);
                    }
                }
            }
            Ok((
                Tensor::new(vec![c, oh, ow], out)?,
                LayerCache::MaxPool2 {
                    input_shape: input.shape().to_vec(),
                    argmax,
                },
            ))
        }
        Op::AvgPool2 => {
            let (c, h, w) = pool_geometry(input)?;
            let (oh, ow) = (h / 2, w / 2);
            let x = input.data();
            let quarter = T::lit(0.25);
            let mut out = Vec::with_capacity(c * oh * ow);
            for ci in 0..c {
                let base = ci * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = base + 2 * oy * w + 2 * ox;
                        out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
                    }
                }
            }
            Ok((
                Tensor::new(vec![c, oh, ow], out)?,
                LayerCache::AvgPool2 {
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
        Op::Dense { weights, bias } => {
            let (outputs, inputs) = dense_dims(weights, bias, input)?;
            let mut out = bias.to_vec();
            gemm(
                outputs,
                inputs,
                1,
                weights.data(),
                Layout::Normal,
                input.data(),
                Layout::Normal,
                &mut out,
                true,
            );
            Ok((Tensor::vector(out), LayerCache::Dense { input: input.clone() }))
        }
        Op::Flatten => Ok((
            input.clone().reshape(&[input.len()])?,
            LayerCache::Flatten {
                input_shape: input.shape().to_vec(),
            },
        )),
        Op::AddSkip { other } => Ok((input.add(other)?, LayerCache::AddSkip)),
    }
}

/// Vector-Jacobian product of one layer. Parameter gradients are only
/// computed when `want_params` is set.
pub fn layer_backward<T: Real>(
    op: Op<'_, T>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
    want_params: bool,
) -> Result<LayerGrads<T>> {
    if op.kind() != cache.kind() {
        return Err(Error::invalid(format!(
            "{:?} backward received a {:?} cache",
            op.kind(),
            cache.kind()
        )));
    }
    match (op, cache) {
        (
            Op::Conv2d {
                weights,
                stride,
                pad,
                ..
            },
            LayerCache::Conv2d { input },
        ) => {
            if want_params {
                let g = conv2d_backward(input, weights, grad_output, stride, pad)?;
                Ok(LayerGrads {
                    input: g.input,
                    skip: None,
                    weights: Some(g.weights),
                    bias: Some(g.bias),
                })
            } else {
                let gi = conv2d_backward_input(input.shape(), weights, grad_output, stride, pad)?;
                Ok(LayerGrads::input_only(gi))
            }
        }
        (Op::Relu, LayerCache::Relu { mask }) => {
            ensure_arg!(
                mask.len() == grad_output.len(),
                "relu grad_output length {} does not match cache {}",
                grad_output.len(),
                mask.len()
            );
            let data = grad_output
                .data()
                .iter()
                .zip(mask)
                .map(|(&g, &m)| if m { g } else { T::zero() })
                .collect();
            Ok(LayerGrads::input_only(Tensor::new(
                grad_output.shape().to_vec(),
                data,
            )?))
        }
        (Op::MaxPool2, LayerCache::MaxPool2 { input_shape, argmax }) => {
            ensure_arg!(
                argmax.len() == grad_output.len(),
                "maxpool grad_output length {} does not match cache {}",
                grad_output.len(),
                argmax.len()
            );
            let mut gi = Tensor::zeros(input_shape);
            let dst = gi.data_mut();
            for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
                dst[idx as usize] += g;
            }
            Ok(LayerGrads::input_only(gi))
        }
        (Op::AvgPool2, LayerCache::AvgPool2 { input_shape }) => {
            let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            ensure_arg!(
                grad_output.shape() == [c, oh, ow],
                "avgpool grad_output shape {:?} does not match {:?}",
                grad_output.shape(),
                [c, oh, ow]
            );
            let quarter = T::lit(0.25);
            let mut gi = Tensor::zeros(input_shape);
            let dst = gi.data_mut();
            let g = grad_output.data();
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = g[(ci * oh + oy) * ow + ox] * quarter;
                        let i = ci * h * w + 2 * oy * w + 2 * ox;
                        dst[i] += v;
                        dst[i + 1] += v;
                        dst[i + w] += v;
                        dst[i + w + 1] += v;
                    }
                }
            }
            Ok(LayerGrads::input_only(gi))
        }
        (Op::Dense { weights, bias }, LayerCache::Dense { input }) => {
            let (outputs, inputs) = dense_dims(weights, bias, input)?;
            ensure_arg!(
                grad_output.len() == outputs,
                "dense grad_output length {} does not match {outputs} outputs",
                grad_output.len()
            );
            let mut gi = vec![T::zero(); inputs];
            gemm(
                inputs,
                outputs,
                1,
                weights.data(),
                Layout::Transposed,
                grad_output.data(),
                Layout::Normal,
                &mut gi,
                false,
            );
            let mut grads = LayerGrads::input_only(Tensor::vector(gi));
            if want_params {
                let mut gw = vec![T::zero(); outputs * inputs];
                gemm(
                    outputs,
                    1,
                    inputs,
                    grad_output.data(),
                    Layout::Normal,
                    input.data(),
                    Layout::Normal,
                    &mut gw,
                    false,
                );
                grads.weights = Some(Tensor::new(vec![outputs, inputs], gw)?);
                grads.bias = Some(grad_output.data().to_vec());
            }
            Ok(grads)
        }
        (Op::Flatten, LayerCache::Flatten { input_shape }) => Ok(LayerGrads::input_only(
            grad_output.clone().reshape(input_shape)?,
        )),
        (Op::AddSkip { other }, LayerCache::AddSkip) => {
            grad_output.check_same_shape(other)?;
            Ok(LayerGrads {
                input: grad_output.clone(),
                skip: Some(grad_output.clone()),
                weights: None,
                bias: None,
            })
        }
        _ => unreachable!("kinds already checked"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn relu_forward_and_mask() {
        let (y, cache) = layer_forward(Op::Relu, &v(&[-1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        let g = layer_backward(Op::Relu, &cache, &v(&[5.0, 5.0]), false).unwrap();
        assert_eq!(g.input.data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_masks_exact_zero() {
        let (_, cache) = layer_forward(Op::Relu, &v(&[0.0])).unwrap();
        let g = layer_backward(Op::Relu, &cache, &v(&[1.0]), false).unwrap();
        assert_eq!(g.input.data(), &[0.0]);
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = layer_forward(Op::MaxPool2, &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = layer_backward(Op::MaxPool2, &cache, &Tensor::new(vec![1, 1, 1], vec![7.0]).unwrap(), false)
            .unwrap();
        assert_eq!(g.input.data(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first_position() {
        let x = Tensor::new(vec![1, 2, 2], vec![3.0f64, 3.0, 3.0, 3.0]).unwrap();
        let (_, cache) = layer_forward(Op::MaxPool2, &x).unwrap();
        let g = layer_backward(Op::MaxPool2, &cache, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), false)
            .unwrap();
        assert_eq!(g.input.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_backward_redistributes_uniformly() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = layer_forward(Op::AvgPool2, &x).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let g = layer_backward(Op::AvgPool2, &cache, &Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap(), false)
            .unwrap();
        assert_eq!(g.input.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn pooling_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2]);
        assert!(layer_forward(Op::MaxPool2, &x).is_err());
        assert!(layer_forward(Op::AvgPool2, &x).is_err());
    }

    #[test]
    fn dense_identity_is_passthrough() {
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f64 } else { 0.0 });
        let x = v(&[0.5, -1.0, 2.0]);
        let (y, _) = layer_forward(Op::Dense { weights: &w, bias: &[0.0; 3] }, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_rejects_wrong_input_length() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        assert!(layer_forward(Op::Dense { weights: &w, bias: &[0.0; 2] }, &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn add_skip_sums_and_splits_gradient() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[10.0, 20.0]);
        let op = Op::AddSkip { other: &b };
        let (y, cache) = layer_forward(op, &a).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
        let g = layer_backward(op, &cache, &v(&[3.0, -1.0]), false).unwrap();
        assert_eq!(g.input.data(), &[3.0, -1.0]);
        assert_eq!(g.skip.unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn cache_kind_mismatch_is_invalid_argument() {
        let (_, cache) = layer_forward(Op::Relu, &v(&[1.0])).unwrap();
        let err = layer_backward(Op::Flatten, &cache, &v(&[1.0]), false).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn flatten_round_trips_shape() {
        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let (y, cache) = layer_forward(Op::Flatten, &x).unwrap();
        assert_eq!(y.shape(), &[8]);
        let g = layer_backward(Op::Flatten, &cache, &y, false).unwrap();
        assert_eq!(g.input, x);
    }
}
