use crate::error::{ensure_arg, Result};
use crate::nn::{layer_backward, layer_forward, LayerCache, Op};
use crate::tensor::{Real, Tensor};
use crate::transforms::{Branch, RngStream, StreamKey};
use crate::zoo::spec::{Architecture, LayerSpec, ModelSpec};

/// Shrinks the init of the last conv of every residual branch so that, with
/// no normalization layers, blocks start close to the identity.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Weights and bias of one parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// A classifier: spec plus one optional parameter block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    params: Vec<Option<Params<T>>>,
}

/// Activations and caches of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    outputs: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn logits(&self) -> &[T] {
        self.outputs.last().expect("validated models have layers").data()
    }

    pub fn output(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer]
    }

    /// Relu masks and pooling choices of the whole pass.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.caches {
            c.activation_pattern(&mut out);
        }
        out
    }
}

/// Gradient injected at a feature tap during the backward sweep.
#[derive(Debug, Clone, Copy)]
pub struct TapGradient<'a, T> {
    pub tap: usize,
    pub grad: &'a Tensor<T>,
}

/// Upstream gradients for [`Model::input_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a, T> {
    pub grad_logits: &'a [T],
    pub feature: Option<TapGradient<'a, T>>,
}

/// Result of [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub input: Tensor<T>,
    /// Per-layer parameter gradients, when requested.
    pub params: Option<Vec<Option<Params<T>>>>,
}

fn param_shape(layer: &LayerSpec) -> Option<(Vec<usize>, usize, usize)> {
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => Some((
            vec![out_channels, in_channels, kernel, kernel],
            out_channels,
            in_channels * kernel * kernel,
        )),
        LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], outputs, inputs)),
        _ => None,
    }
}

impl<T: Real> Model<T> {
    /// Seeded fan-in-scaled uniform weights in `±√(6/fan_in)`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                param_shape(layer).map(|(shape, outputs, fan_in)| {
                    let mut bound = (6.0 / fan_in as f64).sqrt();
                    if matches!(spec.layers.get(i + 1), Some(LayerSpec::AddSkip { .. })) {
                        bound *= RESIDUAL_INIT_SCALE;
                    }
                    let mut rng = RngStream::new(StreamKey::new(seed, i as u64, 0, Branch::Init));
                    Params {
                        weights: Tensor::from_fn(&shape, |_| T::lit(rng.uniform_range(-bound, bound))),
                        bias: vec![T::zero(); outputs],
                    }
                })
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Model with externally supplied parameters, validated against the spec.
    pub fn from_params(spec: ModelSpec, params: Vec<Option<Params<T>>>) -> Result<Self> {
        spec.validate()?;
        ensure_arg!(
            params.len() == spec.layers.len(),
            "{} parameter slots for {} layers",
            params.len(),
            spec.layers.len()
        );
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (param_shape(layer), p) {
                (None, None) => {}
                (Some((shape, outputs, _)), Some(p)) => ensure_arg!(
                    p.weights.shape() == shape.as_slice() && p.bias.len() == outputs,
                    "layer {i}: parameter shapes {:?}/{} do not match {shape:?}/{outputs}",
                    p.weights.shape(),
                    p.bias.len()
                ),
                _ => ensure_arg!(false, "layer {i}: parameter presence does not match its kind"),
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<Params<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params<T>>] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Params {
                        weights: p.weights.cast(),
                        bias: p.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                    })
                })
                .collect(),
        }
    }

    /// `(name, tensor)` for every weight and bias, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("layer{i}.weight"), p.weights.clone()));
                out.push((format!("layer{i}.bias"), Tensor::vector(p.bias.clone())));
            }
        }
        out
    }

    fn op<'a>(&'a self, i: usize, outputs: &'a [Tensor<T>]) -> Op<'a, T> {
        match (&self.spec.layers[i], &self.params[i]) {
            (LayerSpec::Conv2d { stride, pad, .. }, Some(p)) => Op::Conv2d {
                weights: &p.weights,
                bias: &p.bias,
                stride: *stride,
                pad: *pad,
            },
            (LayerSpec::Dense { .. }, Some(p)) => Op::Dense {
                weights: &p.weights,
                bias: &p.bias,
            },
            (LayerSpec::Relu, _) => Op::Relu,
            (LayerSpec::MaxPool2, _) => Op::MaxPool2,
            (LayerSpec::AvgPool2, _) => Op::AvgPool2,
            (LayerSpec::Flatten, _) => Op::Flatten,
            (LayerSpec::AddSkip { from }, _) => Op::AddSkip { other: &outputs[*from] },
            (layer, None) => unreachable!("validated model lacks parameters for {layer:?}"),
        }
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        ensure_arg!(
            x.shape() == self.spec.input_shape,
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            self.spec.input_shape
        );
        let n = self.spec.layers.len();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let (out, cache) = {
                let input = if i == 0 { x } else { &outputs[i - 1] };
                layer_forward(self.op(i, &outputs), input)?
            };
            outputs.push(out);
            caches.push(cache);
        }
        Ok(ForwardTrace { outputs, caches })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward_trace(x)?.logits().to_vec())
    }

    /// Predicted class: argmax over logits, ties to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.logits(x)?))
    }

    /// Logits plus the activation right after tap layer `tap` (1..=4).
    pub fn forward_with_taps(&self, x: &Tensor<T>, tap: usize) -> Result<(Vec<T>, Tensor<T>)> {
        let layer = self.spec.tap_layer(tap)?;
        let trace = self.forward_trace(x)?;
        Ok((trace.logits().to_vec(), trace.outputs[layer].clone()))
    }

    /// One backward sweep from `grad_logits`, with an optional gradient
    /// injected at a tap; contributions are summed where paths merge.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &[T],
        feature: Option<TapGradient<'_, T>>,
        want_params: bool,
    ) -> Result<Backward<T>> {
        let n = self.spec.layers.len();
        ensure_arg!(
            grad_logits.len() == self.spec.num_classes,
            "grad_logits length {} does not match {} classes",
            grad_logits.len(),
            self.spec.num_classes
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(Tensor::vector(grad_logits.to_vec()));
        let injection = match feature {
            Some(f) => {
                let layer = self.spec.tap_layer(f.tap)?;
                ensure_arg!(
                    f.grad.shape() == trace.outputs[layer].shape(),
                    "tap {} gradient shape {:?} does not match activation {:?}",
                    f.tap,
                    f.grad.shape(),
                    trace.outputs[layer].shape()
                );
                Some((layer, f.grad))
            }
            None => None,
        };
        let mut param_grads = want_params.then(|| vec![None; n]);
        let mut input_grad = None;
        for i in (0..n).rev() {
            let mut g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(trace.outputs[i].shape()));
            if let Some((layer, extra)) = injection {
                if layer == i {
                    g.add_assign(extra)?;
                }
            }
            let lg = layer_backward(self.op(i, &trace.outputs), &trace.caches[i], &g, want_params)?;
            if let Some(pg) = param_grads.as_mut() {
                if let (Some(weights), Some(bias)) = (lg.weights, lg.bias) {
                    pg[i] = Some(Params { weights, bias });
                }
            }
            if let (LayerSpec::AddSkip { from }, Some(skip)) = (&self.spec.layers[i], lg.skip) {
                accumulate(&mut grads[*from], skip)?;
            }
            if i == 0 {
                input_grad = Some(lg.input);
            } else {
                accumulate(&mut grads[i - 1], lg.input)?;
            }
        }
        Ok(Backward {
            input: input_grad.expect("loop reaches layer 0"),
            params: param_grads,
        })
    }

    /// Gradient of `⟨grad_logits, logits(x)⟩ + ⟨grad_feature, f_tap(x)⟩` with respect to `x`.
    pub fn input_gradient(&self, x: &Tensor<T>, upstream: Upstream<'_, T>) -> Result<Tensor<T>> {
        let trace = self.forward_trace(x)?;
        Ok(self.backward(&trace, upstream.grad_logits, upstream.feature, false)?.input)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Build a zoo architecture by name with seeded initial weights.
pub fn build_model(name: &str, num_classes: usize, input_shape: [usize; 3], seed: u64) -> Result<Model<f32>> {
    let arch: Architecture = name.parse()?;
    Model::init(arch.spec(num_classes, input_shape)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = build_model("ConvNetA", 10, [3, 32, 32], 7).unwrap();
        let b = build_model("ConvNetA", 10, [3, 32, 32], 7).unwrap();
        let c = build_model("ConvNetA", 10, [3, 32, 32], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(build_model("VGG16", 10, [3, 32, 32], 7).is_err());
    }

    #[test]
    fn logits_have_k_entries_and_taps_agree() {
        let m = build_model("ConvNetA", 10, [3, 32, 32], 1).unwrap();
        let x = Tensor::from_fn(&[3, 32, 32], |i| ((i * 37) % 101) as f32 / 101.0);
        let plain = m.logits(&x).unwrap();
        assert_eq!(plain.len(), 10);
        for tap in 1..=4 {
            let (logits, _) = m.forward_with_taps(&x, tap).unwrap();
            assert_eq!(logits, plain);
        }
        let (_, f4) = m.forward_with_taps(&x, 4).unwrap();
        assert_eq!(f4.shape(), &[128, 2, 2]);
        assert!(m.forward_with_taps(&x, 0).is_err());
        assert!(m.forward_with_taps(&x, 5).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = build_model("MiniResNet", 10, [3, 32, 32], 1).unwrap();
        for p in m.params_mut().iter_mut().flatten() {
            p.weights.data_mut().fill(0.0);
        }
        let x = Tensor::filled(&[3, 32, 32], 0.5);
        assert!(m.logits(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_input_gradient() {
        let m = build_model("ConvNetB", 10, [3, 32, 32], 2).unwrap();
        let x = Tensor::filled(&[3, 32, 32], 0.3);
        let g = m
            .input_gradient(&x, Upstream { grad_logits: &[0.0; 10], feature: None })
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upstream_shape_errors() {
        let m = build_model("ConvNetA", 10, [3, 32, 32], 2).unwrap();
        let x = Tensor::filled(&[3, 32, 32], 0.3);
        assert!(m.input_gradient(&x, Upstream { grad_logits: &[0.0; 9], feature: None }).is_err());
        let wrong = Tensor::zeros(&[1, 2, 3]);
        let upstream = Upstream {
            grad_logits: &[0.0; 10],
            feature: Some(TapGradient { tap: 2, grad: &wrong }),
        };
        assert!(m.input_gradient(&x, upstream).is_err());
        assert!(m.logits(&Tensor::zeros(&[3, 16, 16])).is_err());
    }
}
