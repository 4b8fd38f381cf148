#![allow(dead_code)]

use advlab::data::{Dataset, ImageRecord};
use advlab::zoo::{LayerSpec, Model, ModelSpec};
use advlab::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

fn conv(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: cin, out_channels: cout, kernel: 3, stride: 1, pad: 1 }
}

/// Small network touching every layer kind: conv, relu, skip-add, max
/// and average pooling, flatten and dense.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec::new(
        "tiny",
        [2, 8, 8],
        5,
        vec![
            conv(2, 3),
            LayerSpec::Relu,
            conv(3, 3),
            LayerSpec::AddSkip { from: 0 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(3, 4),
            LayerSpec::Relu,
            LayerSpec::AvgPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 16, outputs: 5 },
        ],
        [1, 4, 7, 8],
    )
    .unwrap()
}

pub fn tiny_model(seed: u64) -> Model<f32> {
    Model::init(tiny_spec(), seed).unwrap()
}

/// Eight distinct two-channel images cycling through the five classes.
pub fn tiny_dataset() -> Dataset {
    let mut r = rng(99);
    let records = (0..8)
        .map(|i| ImageRecord {
            pixels: random_tensor(&mut r, &[2, 8, 8], 0.0, 1.0),
            label: i % 5,
        })
        .collect();
    Dataset::new(records, 5, "tiny").unwrap()
}
