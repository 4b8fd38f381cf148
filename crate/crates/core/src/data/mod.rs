//! Image datasets: binary parsers, seeded target assignment and evaluation
//! subsets.

mod cifar;
mod idx;
pub mod synthetic;

use std::path::{Path, PathBuf};

pub use cifar::{parse_cifar10, CIFAR_RECORD_LEN};
pub use idx::parse_idx;

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::Tensor;
use crate::transforms::{Branch, RngStream, StreamKey};

/// Environment variable naming the root directory searched for dataset files.
pub const DATA_DIR_ENV: &str = "ADVLAB_DATA_DIR";

/// One image with its label; pixels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Ordered image records sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    num_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if let Some(first) = records.first() {
            let shape = first.pixels.shape();
            ensure_arg!(shape.len() == 3, "images must be C×H×W, got {shape:?}");
            for (i, r) in records.iter().enumerate() {
                ensure_arg!(
                    r.pixels.shape() == shape,
                    "record {i} has shape {:?}, expected {shape:?}",
                    r.pixels.shape()
                );
                ensure_arg!(
                    r.label < num_classes,
                    "record {i} label {} not below {num_classes}",
                    r.label
                );
                ensure_arg!(
                    r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
                    "record {i} has pixels outside [0,1]"
                );
            }
        }
        Ok(Self {
            records,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `[C, H, W]` of the records, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.records.first().map(|r| {
            let s = r.pixels.shape();
            [s[0], s[1], s[2]]
        })
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        ensure_arg!(
            self.records.iter().all(|r| r.label < num_classes),
            "labels exceed requested class count {num_classes}"
        );
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            ensure_arg!(i < self.len(), "subset index {i} out of range for {} records", self.len());
            records.push(self.records[i].clone());
        }
        Ok(Self {
            records,
            num_classes: self.num_classes,
            provenance: format!("{} [subset of {}]", self.provenance, indices.len()),
        })
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            records: self.records[..n].to_vec(),
            num_classes: self.num_classes,
            provenance: format!("{} [first {n}]", self.provenance),
        }
    }

    /// Indices of the first `n` records of a shuffle keyed by `(seed, eval-subset)`.
    pub fn eval_subset_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngStream::new(StreamKey::new(seed, 0, 0, Branch::EvalSubset)).shuffle(&mut order);
        order.truncate(n.min(self.len()));
        order
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        self.records.iter().map(|r| r.pixels.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Serialize to the CIFAR-10 binary record layout.
    pub fn to_cifar10(&self) -> Result<Vec<u8>> {
        cifar::encode(self)
    }

    /// Serialize to an (images, labels) pair of IDX files.
    pub fn to_idx(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        idx::encode(self)
    }
}

/// Per-image target classes, never equal to the true label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    pub targets: Vec<usize>,
    pub seed: u64,
}

/// Draw every image's target uniformly from the `K − 1` wrong classes using
/// a stream keyed by `(seed, image index)`.
pub fn assign_targets(dataset: &Dataset, seed: u64) -> Result<TargetAssignment> {
    let k = dataset.num_classes();
    ensure_arg!(k >= 2, "targeted attacks need at least two classes, got {k}");
    let targets = dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let draw = RngStream::new(StreamKey::new(seed, i as u64, 0, Branch::Targets)).below(k - 1);
            if draw >= r.label {
                draw + 1
            } else {
                draw
            }
        })
        .collect();
    Ok(TargetAssignment { targets, seed })
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Resolve a dataset path: absolute paths are kept, relative ones are joined
/// onto `ADVLAB_DATA_DIR` when set, otherwise onto `base`.
pub fn resolve_data_path(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => base.join(path),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
