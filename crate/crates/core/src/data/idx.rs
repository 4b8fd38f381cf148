//! IDX files: a big-endian magic `0x0000_08NN` (`NN` = rank, element type
//! unsigned byte), `NN` big-endian `u32` dimensions, then the raw payload.
//!
//! Image files of rank 3 are read as `N × H × W` single-channel images and
//! rank 4 as `N × C × H × W`. Label files have rank 1.

use super::{to_u8, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

struct Header {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn read_header(bytes: &[u8], file: &str) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::parse(0, format!("{file}: missing IDX magic")));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
        return Err(Error::parse(
            0,
            format!("{file}: bad IDX magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::parse(3, format!("{file}: IDX rank 0")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let at = 4 + 4 * d;
        let field = bytes
            .get(at..at + 4)
            .ok_or_else(|| Error::parse(at, format!("{file}: truncated dimension {d}")))?;
        dims.push(u32::from_be_bytes(field.try_into().expect("4 bytes")) as usize);
    }
    let payload_offset = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let available = bytes.len() - payload_offset.min(bytes.len());
    if available < expected {
        return Err(Error::parse(
            bytes.len(),
            format!("{file}: truncated payload, {available} of {expected} bytes"),
        ));
    }
    if available > expected {
        return Err(Error::parse(
            payload_offset + expected,
            format!("{file}: {} trailing bytes after payload", available - expected),
        ));
    }
    Ok(Header { dims, payload_offset })
}

/// Parse an images/labels IDX pair. Pixels are divided by 255; the class
/// count is one past the largest label (at least two).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = read_header(images, "images")?;
    if images[3] != 3 && images[3] != 4 {
        return Err(Error::parse(3, format!("images: expected rank 3 or 4, got {}", images[3])));
    }
    let lab = read_header(labels, "labels")?;
    if labels[3] != 1 {
        return Err(Error::parse(3, format!("labels: expected rank 1, got {}", labels[3])));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::parse(
            4,
            format!("labels: count {} does not match {n} images", lab.dims[0]),
        ));
    }
    let shape = if img.dims.len() == 3 {
        vec![1, img.dims[1], img.dims[2]]
    } else {
        img.dims[1..].to_vec()
    };
    let per_image: usize = shape.iter().product();
    if per_image == 0 {
        return Err(Error::parse(8, "images: zero-sized image dimension"));
    }
    let payload = &images[img.payload_offset..];
    let label_bytes = &labels[lab.payload_offset..];
    let num_classes = label_bytes.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let records = payload
        .chunks_exact(per_image)
        .zip(label_bytes)
        .map(|(px, &label)| ImageRecord {
            pixels: Tensor::new(shape.clone(), px.iter().map(|&b| b as f32 / 255.0).collect())
                .expect("shape matches chunk"),
            label: label as usize,
        })
        .collect();
    Dataset::new(records, num_classes, "idx")
}

pub(super) fn encode(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = dataset.len() as u32;
    let shape = dataset.image_shape().unwrap_or([1, 1, 1]);
    let mut images = Vec::new();
    if shape[0] == 1 {
        images.extend_from_slice(&[0, 0, UBYTE, 3]);
        for d in [n, shape[1] as u32, shape[2] as u32] {
            images.extend_from_slice(&d.to_be_bytes());
        }
    } else {
        images.extend_from_slice(&[0, 0, UBYTE, 4]);
        for d in [n, shape[0] as u32, shape[1] as u32, shape[2] as u32] {
            images.extend_from_slice(&d.to_be_bytes());
        }
    }
    let mut labels = vec![0, 0, UBYTE, 1];
    labels.extend_from_slice(&n.to_be_bytes());
    for r in dataset.records() {
        images.extend(r.pixels.data().iter().map(|&v| to_u8(v)));
        let label = u8::try_from(r.label)
            .map_err(|_| Error::invalid(format!("label {} does not fit a byte", r.label)))?;
        labels.push(label);
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: &[u32]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn two_images_two_by_two() {
        let mut images = header(&[2, 2, 2]);
        images.extend_from_slice(&[0, 51, 102, 255, 1, 2, 3, 4]);
        let mut labels = header(&[2]);
        labels.extend_from_slice(&[1, 0]);
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), Some([1, 2, 2]));
        assert_eq!(ds.records()[0].pixels.data()[3], 1.0);
        assert_eq!(ds.records()[0].pixels.data()[1], 0.2);
        assert_eq!(ds.labels(), vec![1, 0]);
    }

    #[test]
    fn empty_stream_errors_at_zero() {
        let err = parse_idx(&[], &header(&[0])).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut images = header(&[1, 2, 2]);
        images.extend_from_slice(&[0; 4]);
        let mut labels = header(&[1]);
        labels.push(0);

        let mut bad = images.clone();
        bad[2] = 0x09;
        assert!(matches!(parse_idx(&bad, &labels), Err(Error::Parse { offset: 0, .. })));

        let truncated = &images[..images.len() - 1];
        assert!(matches!(parse_idx(truncated, &labels), Err(Error::Parse { .. })));

        let mut two_labels = header(&[2]);
        two_labels.extend_from_slice(&[0, 0]);
        assert!(matches!(parse_idx(&images, &two_labels), Err(Error::Parse { offset: 4, .. })));
    }
}
