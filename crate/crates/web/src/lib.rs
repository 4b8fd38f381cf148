//! Browser demo: Gaussian TI kernels, DI and locality previews, and a
//! targeted attack against a small model trained in the page.

use advlab::attack::{attack, AttackConfig, AttackOptions};
use advlab::data::{synthetic, Dataset};
use advlab::train::{eval_accuracy, fit, TrainHyper};
use advlab::transforms::{di_apply, loc_apply, Branch, CropScale, DiParams, DiTrace, LocTrace, RngStream, StreamKey, TiKernel};
use advlab::zoo::{Architecture, Model};
use advlab::Tensor;
use wasm_bindgen::prelude::*;

const SIDE: usize = 32;

fn js(e: advlab::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Planar RGB in `[0, 1]` to row-major RGBA bytes.
pub fn to_rgba(img: &Tensor<f32>) -> Vec<u8> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = d[(ch.min(c - 1)) * h * w + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Weights of the `(2r+1)²` Gaussian smoothing kernel, row-major.
#[wasm_bindgen]
pub fn ti_kernel(radius: usize, sigma: f64) -> Result<Vec<f64>, JsError> {
    Ok(TiKernel::gaussian(radius, sigma).map_err(js)?.weights().to_vec())
}

#[wasm_bindgen]
pub fn class_name(label: usize) -> String {
    synthetic::CLASS_NAMES.get(label).copied().unwrap_or("?").to_string()
}

/// Outcome of one attack, ready for canvases.
#[wasm_bindgen(getter_with_clone)]
pub struct AttackView {
    pub adversarial: Vec<u8>,
    /// δ scaled from `[−ε, ε]` to the full byte range around grey.
    pub perturbation: Vec<u8>,
    pub predicted: usize,
    pub success: bool,
    pub iterations: usize,
}

/// A synthetic dataset and a ConvNetA trained epoch by epoch.
#[wasm_bindgen]
pub struct Lab {
    seed: u64,
    train: Dataset,
    test: Dataset,
    model: Model<f32>,
    epochs: usize,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, train_size: usize) -> Result<Lab, JsError> {
        let seed = seed as u64;
        let train = synthetic::generate(train_size.max(10), seed).map_err(js)?;
        let test = synthetic::generate(60, seed.wrapping_add(1)).map_err(js)?;
        let spec = Architecture::ConvNetA.spec(10, [3, SIDE, SIDE]).map_err(js)?;
        let model = Model::init(spec, seed).map_err(js)?;
        Ok(Lab { seed, train, test, model, epochs: 0 })
    }

    /// One more epoch of training; returns the log line and the test accuracy.
    pub fn train_epoch(&mut self) -> Result<String, JsError> {
        let hyper = TrainHyper {
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.02,
            decay: vec![],
            seed: self.seed.wrapping_add(self.epochs as u64),
            ..TrainHyper::default()
        };
        let mut line = String::new();
        self.model = fit(self.model.clone(), &self.train, &hyper, &mut |s, _| line = s.log_line()).map_err(js)?;
        self.epochs += 1;
        let acc = eval_accuracy(&self.model, &self.test).map_err(js)?;
        Ok(format!("{} | test accuracy {:.3}", line.replacen("epoch 1", &format!("epoch {}", self.epochs), 1), acc.value))
    }

    pub fn test_size(&self) -> usize {
        self.test.len()
    }

    pub fn label(&self, index: usize) -> usize {
        self.test.records()[index % self.test.len()].label
    }

    pub fn predict(&self, index: usize) -> Result<usize, JsError> {
        self.model.predict(&self.image(index)).map_err(js)
    }

    pub fn image_rgba(&self, index: usize) -> Vec<u8> {
        to_rgba(&self.image(index))
    }

    /// The DI (`kind = "di"`, applied with probability 1) or locality crop
    /// (`kind = "loc"`) draw number `draw` of a test image.
    pub fn preview(&self, index: usize, kind: &str, draw: u32, crop_area: f64) -> Result<Vec<u8>, JsError> {
        let x = self.image(index);
        let mut rng = RngStream::new(StreamKey::new(self.seed, index as u64, draw as u64, Branch::Other(7)));
        let out = match kind {
            "di" => {
                let trace = DiTrace::draw(SIDE, SIDE, &DiParams { p: 1.0, ..DiParams::default() }, &mut rng).map_err(js)?;
                di_apply(&x, &trace).map_err(js)?
            }
            "loc" => {
                let trace = LocTrace::draw(SIDE, SIDE, &CropScale::new(crop_area, 0.0).map_err(js)?, &mut rng).map_err(js)?;
                loc_apply(&x, &trace).map_err(js)?
            }
            other => return Err(JsError::new(&format!("unknown preview {other:?} (expected di or loc)"))),
        };
        Ok(to_rgba(&out))
    }

    /// Run a preset against the in-page model.
    pub fn attack(&self, index: usize, target: usize, preset: &str, iterations: usize) -> Result<AttackView, JsError> {
        let cfg = AttackConfig { iterations, seed: self.seed, ..AttackConfig::preset(preset).map_err(js)? };
        let x = self.image(index);
        let r = attack(&self.model, &x, target, &cfg, index as u64, &AttackOptions::default()).map_err(js)?;
        let eps = cfg.epsilon as f32;
        let shown = r.delta.map(|d| 0.5 + 0.5 * d / eps);
        Ok(AttackView {
            adversarial: to_rgba(&r.x_adv),
            perturbation: to_rgba(&shown),
            predicted: self.model.predict(&r.x_adv).map_err(js)?,
            success: r.success,
            iterations: r.iterations,
        })
    }
}

impl Lab {
    fn image(&self, index: usize) -> Tensor<f32> {
        self.test.records()[index % self.test.len()].pixels.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        let w = ti_kernel(2, 3.0).unwrap();
        assert_eq!(w.len(), 25);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lab_round_trip() {
        let mut lab = Lab::new(3, 40).unwrap();
        assert!(lab.train_epoch().unwrap().starts_with("epoch 1 loss"));
        assert_eq!(lab.image_rgba(0).len(), SIDE * SIDE * 4);
        assert_eq!(lab.preview(1, "di", 0, 0.1).unwrap().len(), SIDE * SIDE * 4);
        assert_eq!(lab.preview(1, "loc", 0, 0.1).unwrap(), lab.preview(1, "loc", 0, 0.1).unwrap());
        let target = (lab.label(2) + 1) % 10;
        let view = lab.attack(2, target, "dtmi-ce", 5).unwrap();
        assert_eq!(view.iterations, 5);
        assert_eq!(view.adversarial.len(), SIDE * SIDE * 4);
        assert_eq!(view.success, view.predicted == target);
    }
}
