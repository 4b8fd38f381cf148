//! Binary checkpoints: `"AVLB"`, a little-endian `u16` version, the 8-byte
//! spec fingerprint, then one record per array:
//! `{u32 name length, name, u32 ndim, u32 × ndim dims, f32 payload}`,
//! every integer and float little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::model::{Model, Params};
use crate::zoo::spec::ModelSpec;

pub const MAGIC: &[u8; 4] = b"AVLB";
pub const VERSION: u16 = 1;

fn ckpt(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.spec().fingerprint());
    for (name, t) in model.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(ckpt(format!("truncated file while reading {}", what()))),
        }
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decode a checkpoint against the spec it is expected to hold.
pub fn decode_checkpoint(bytes: &[u8], spec: &ModelSpec) -> Result<Model<f32>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, &|| "magic".into())?;
    if magic != MAGIC {
        return Err(ckpt(format!("bad magic {magic:02x?}")));
    }
    let version = u16::from_le_bytes(r.take(2, &|| "version".into())?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(ckpt(format!("unsupported version {version}")));
    }
    let fingerprint = r.take(8, &|| "fingerprint".into())?;
    let expected = spec.fingerprint();
    if fingerprint != expected {
        return Err(ckpt(format!(
            "fingerprint mismatch: file {fingerprint:02x?}, spec {} has {expected:02x?}",
            spec.name
        )));
    }
    let mut arrays = std::collections::BTreeMap::new();
    while r.at < bytes.len() {
        let name_len = r.u32(&|| "array name length".into())? as usize;
        let name = String::from_utf8(r.take(name_len, &|| "array name".into())?.to_vec())
            .map_err(|_| ckpt("array name is not UTF-8"))?;
        let label = || format!("array {name}");
        let ndim = r.u32(&label)? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32(&label)? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count.saturating_mul(4), &label)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| ckpt(format!("array {name}: {e}")))?;
        arrays.insert(name, t);
    }
    let mut params = Vec::with_capacity(spec.layers.len());
    let template = Model::<f32>::init(spec.clone(), 0)?;
    for (i, slot) in template.params().iter().enumerate() {
        params.push(match slot {
            None => None,
            Some(_) => {
                let mut get = |suffix: &str| {
                    let key = format!("layer{i}.{suffix}");
                    arrays.remove(&key).ok_or_else(|| ckpt(format!("missing array {key}")))
                };
                let weights = get("weight")?;
                let bias = get("bias")?.into_data();
                Some(Params { weights, bias })
            }
        });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(ckpt(format!("unexpected array {extra}")));
    }
    Model::from_params(spec.clone(), params).map_err(|e| ckpt(e.to_string()))
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, spec)
}
