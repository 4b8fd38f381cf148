//! Mini-batch momentum SGD on softmax cross-entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure_arg, Error, Result};
use crate::nn::softmax_cross_entropy;
use crate::tensor::argmax;
use crate::transforms::{Branch, RngStream, StreamKey};
use crate::zoo::{Model, ModelSpec, Params};

/// Per-sample gradients are summed in fixed chunks of this many samples,
/// then chunk sums are added in order, so results do not depend on the
/// thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// `(epoch, multiplier)`: from that zero-based epoch on, the learning
    /// rate is additionally multiplied by `multiplier`.
    pub decay: Vec<(usize, f32)>,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            decay: vec![(20, 0.1), (25, 0.1)],
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.batch_size >= 1, "batch_size must be positive");
        ensure_arg!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            "learning_rate must be finite and non-negative, got {}",
            self.learning_rate
        );
        ensure_arg!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0, 1), got {}",
            self.momentum
        );
        for &(epoch, m) in &self.decay {
            ensure_arg!(m.is_finite() && m > 0.0, "decay multiplier at epoch {epoch} must be positive, got {m}");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        self.decay
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.learning_rate, |lr, &(_, m)| lr * m)
    }
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// One-based epoch number.
    pub epoch: usize,
    pub loss: f32,
    /// Training accuracy of the predictions made during the epoch.
    pub accuracy: f32,
    pub learning_rate: f32,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!("epoch {} loss {:.6} accuracy {:.4}", self.epoch, self.loss, self.accuracy)
    }
}

type Grads = Vec<Option<Params<f32>>>;

fn add_grads(acc: &mut Grads, g: Grads) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                a.weights.add_assign(&g.weights).expect("same layer shapes");
                a.bias.iter_mut().zip(&g.bias).for_each(|(x, y)| *x += y);
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

struct SampleOut {
    loss: f32,
    correct: bool,
    grads: Grads,
}

fn sample_grad(model: &Model<f32>, dataset: &Dataset, i: usize) -> Result<SampleOut> {
    let r = &dataset.records()[i];
    let trace = model.forward_trace(&r.pixels)?;
    let logits = trace.logits();
    let correct = argmax(logits) == r.label;
    let (loss, grad) = softmax_cross_entropy(logits, r.label)?;
    let back = model.backward(&trace, &grad, None, true)?;
    Ok(SampleOut {
        loss,
        correct,
        grads: back.params.expect("requested parameter gradients"),
    })
}

/// Initialize `spec` with `hyper.seed` and train it.
pub fn train(
    spec: ModelSpec,
    dataset: &Dataset,
    hyper: &TrainHyper,
    on_epoch: &mut dyn FnMut(&EpochStats, &Model<f32>),
) -> Result<Model<f32>> {
    let model = Model::init(spec, hyper.seed)?;
    fit(model, dataset, hyper, on_epoch)
}

/// Continue training an existing model.
pub fn fit(
    mut model: Model<f32>,
    dataset: &Dataset,
    hyper: &TrainHyper,
    on_epoch: &mut dyn FnMut(&EpochStats, &Model<f32>),
) -> Result<Model<f32>> {
    hyper.validate()?;
    if hyper.epochs == 0 {
        return Ok(model);
    }
    ensure_arg!(!dataset.is_empty(), "cannot train on an empty dataset");
    let spec = model.spec();
    ensure_arg!(
        dataset.image_shape() == Some(spec.input_shape),
        "dataset images {:?} do not match model input {:?}",
        dataset.image_shape(),
        spec.input_shape
    );
    ensure_arg!(
        dataset.num_classes() <= spec.num_classes,
        "dataset has {} classes, model only {}",
        dataset.num_classes(),
        spec.num_classes
    );

    let mut velocity: Grads = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| Params {
                weights: crate::Tensor::zeros(p.weights.shape()),
                bias: vec![0.0; p.bias.len()],
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..hyper.epochs {
        let lr = hyper.learning_rate_at(epoch);
        order.sort_unstable();
        RngStream::new(StreamKey::new(hyper.seed, epoch as u64, 0, Branch::Shuffle)).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let chunks: Vec<Result<(f64, usize, Grads)>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut loss = 0.0f64;
                    let mut hits = 0;
                    let mut acc: Grads = vec![None; model.params().len()];
                    for &i in chunk {
                        let s = sample_grad(&model, dataset, i)?;
                        loss += s.loss as f64;
                        hits += s.correct as usize;
                        add_grads(&mut acc, s.grads);
                    }
                    Ok((loss, hits, acc))
                })
                .collect();
            let mut total: Grads = vec![None; model.params().len()];
            let mut batch_loss = 0.0f64;
            for c in chunks {
                let (loss, hits, g) = c?;
                batch_loss += loss;
                correct += hits;
                add_grads(&mut total, g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    message: format!("non-finite loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss;
            let inv = 1.0 / batch.len() as f32;
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&total) {
                if let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) {
                    sgd_update(p.weights.data_mut(), v.weights.data_mut(), g.weights.data(), inv, lr, hyper.momentum);
                    sgd_update(&mut p.bias, &mut v.bias, &g.bias, inv, lr, hyper.momentum);
                }
            }
            // Relu masks NaN activations to zero, so a finite loss alone does not rule out divergence.
            if !model.params().iter().flatten().all(|p| p.weights.all_finite() && p.bias.iter().all(|b| b.is_finite())) {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    message: "non-finite weights after update".into(),
                });
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: (loss_sum / dataset.len() as f64) as f32,
            accuracy: correct as f32 / dataset.len() as f32,
            learning_rate: lr,
        };
        on_epoch(&stats, &model);
    }
    Ok(model)
}

/// Classic momentum: `v ← μv + g`, `w ← w − lr·v`.
fn sgd_update(w: &mut [f32], v: &mut [f32], g: &[f32], scale: f32, lr: f32, mu: f32) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g * scale;
        *w -= lr * *v;
    }
}

/// Classification accuracy; `empty` is set (and `value` is 0) for an empty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub value: f64,
    pub correct: usize,
    pub total: usize,
    pub empty: bool,
}

pub fn eval_accuracy(model: &Model<f32>, dataset: &Dataset) -> Result<Accuracy> {
    let hits: Vec<Result<bool>> = dataset
        .records()
        .par_iter()
        .map(|r| Ok(model.predict(&r.pixels)? == r.label))
        .collect();
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    let total = dataset.len();
    Ok(Accuracy {
        value: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        empty: total == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, ImageRecord};
    use crate::zoo::{Architecture, LayerSpec};

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(
            "tiny",
            [1, 8, 8],
            4,
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 4, out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 4 },
            ],
            [0, 2, 3, 4],
        )
        .unwrap()
    }

    fn tiny_data(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| ImageRecord {
                pixels: crate::Tensor::from_fn(&[1, 8, 8], |j| ((i * 31 + j * 17) % 23) as f32 / 22.0),
                label: i % 4,
            })
            .collect();
        Dataset::new(records, 4, "fixture").unwrap()
    }

    #[test]
    fn memorizes_eight_images() {
        let ds = tiny_data(8);
        let hyper = TrainHyper {
            epochs: 150,
            batch_size: 4,
            learning_rate: 0.05,
            decay: vec![],
            seed: 3,
            ..TrainHyper::default()
        };
        let m = train(tiny_spec(), &ds, &hyper, &mut |_, _| {}).unwrap();
        assert_eq!(eval_accuracy(&m, &ds).unwrap().value, 1.0);
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_weights() {
        let ds = tiny_data(8);
        let init = Model::init(tiny_spec(), 5).unwrap();
        let hyper = TrainHyper { epochs: 0, seed: 5, ..TrainHyper::default() };
        assert_eq!(train(tiny_spec(), &ds, &hyper, &mut |_, _| {}).unwrap(), init);
        let hyper = TrainHyper { epochs: 1, learning_rate: 0.0, seed: 5, ..TrainHyper::default() };
        assert_eq!(train(tiny_spec(), &ds, &hyper, &mut |_, _| {}).unwrap(), init);
    }

    #[test]
    fn deterministic_and_unaffected_by_eval_calls() {
        let ds = tiny_data(12);
        let hyper = TrainHyper { epochs: 3, batch_size: 5, seed: 9, ..TrainHyper::default() };
        let a = train(tiny_spec(), &ds, &hyper, &mut |_, _| {}).unwrap();
        let b = train(tiny_spec(), &ds, &hyper, &mut |_, m| {
            eval_accuracy(m, &ds).unwrap();
        })
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_edge_cases() {
        let mut m = Model::init(tiny_spec(), 1).unwrap();
        for p in m.params_mut().iter_mut().flatten() {
            p.weights.data_mut().fill(0.0);
        }
        // All-zero logits tie, so the prediction is class 0.
        let ds = tiny_data(20);
        assert_eq!(eval_accuracy(&m, &ds).unwrap().value, 5.0 / 20.0);
        let empty = Dataset::new(vec![], 4, "empty").unwrap();
        let acc = eval_accuracy(&m, &empty).unwrap();
        assert!(acc.empty && acc.value == 0.0);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = synthetic::generate(16, 1).unwrap();
        let spec = Architecture::ConvNetB.spec(10, [3, 32, 32]).unwrap();
        let hyper = TrainHyper { epochs: 2, batch_size: 8, learning_rate: 1e30, momentum: 0.0, ..TrainHyper::default() };
        match train(spec, &ds, &hyper, &mut |_, _| {}) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn decay_schedule() {
        let h = TrainHyper::default();
        assert_eq!(h.learning_rate_at(0), 0.05);
        assert!((h.learning_rate_at(20) - 0.005).abs() < 1e-9);
        assert!((h.learning_rate_at(29) - 0.0005).abs() < 1e-9);
        assert!(TrainHyper { momentum: 1.0, ..h.clone() }.validate().is_err());
        assert!(TrainHyper { batch_size: 0, ..h }.validate().is_err());
    }
}
