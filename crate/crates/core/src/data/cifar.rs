//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the R, G and B planes, each 32×32 row-major.

use super::{to_u8, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::parse(0, "empty CIFAR-10 file"));
    }
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(Error::parse(
            whole,
            format!(
                "length {} is not a multiple of {CIFAR_RECORD_LEN} (partial record of {} bytes)",
                bytes.len(),
                bytes.len() - whole
            ),
        ));
    }
    let mut records = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    for (i, chunk) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = chunk[0] as usize;
        if label >= CLASSES {
            return Err(Error::parse(i * CIFAR_RECORD_LEN, format!("label byte {label} > 9")));
        }
        let pixels = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
        records.push(ImageRecord {
            pixels: Tensor::new(vec![3, 32, 32], pixels).expect("fixed record size"),
            label,
        });
    }
    Dataset::new(records, CLASSES, "cifar10")
}

pub(super) fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    if let Some(shape) = dataset.image_shape() {
        if shape != [3, 32, 32] || dataset.num_classes() > CLASSES {
            return Err(Error::invalid(format!(
                "CIFAR-10 needs 3×32×32 images and at most 10 classes, got {shape:?} / {}",
                dataset.num_classes()
            )));
        }
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_LEN);
    for r in dataset.records() {
        out.push(r.label as u8);
        out.extend(r.pixels.data().iter().map(|&v| to_u8(v)));
    }
    Ok(out)
}
