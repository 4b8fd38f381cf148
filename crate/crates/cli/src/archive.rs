//! Snapshot archives: a JSON manifest plus one raw little-endian f32 file
//! per (image, checkpoint).

use std::path::{Path, PathBuf};

use advlab::attack::AttackConfig;
use advlab::eval::SnapshotSet;
use advlab::Tensor;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::failure::{bail, Classify, Kind};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "advlab-snapshots/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub attack: String,
    pub surrogates: Vec<String>,
    pub config: AttackConfig,
    pub shape: Vec<usize>,
    pub checkpoints: Vec<usize>,
    pub image_ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub white_box: Vec<bool>,
    /// `files[c][i]`, relative to the archive directory.
    pub files: Vec<Vec<String>>,
}

/// Directory name of the archive for `attack` against `surrogates`.
pub fn archive_name(attack: &str, surrogates: &[String]) -> String {
    format!("{attack}__{}", surrogates.join("+"))
}

fn file_name(id: usize, checkpoint: usize) -> String {
    format!("deltas/img{id:06}_it{checkpoint:04}.f32")
}

fn encode(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .kind(Kind::Data)
}

pub fn save(dir: &Path, set: &SnapshotSet, surrogates: &[String], config: &AttackConfig) -> Result<Manifest> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)
            .with_context(|| format!("cannot replace {}", dir.display()))
            .kind(Kind::Data)?;
    }
    std::fs::create_dir_all(dir.join("deltas"))
        .with_context(|| format!("cannot create {}", dir.display()))
        .kind(Kind::Data)?;
    let mut files = Vec::with_capacity(set.checkpoints.len());
    for (c, &checkpoint) in set.checkpoints.iter().enumerate() {
        let mut row = Vec::with_capacity(set.image_ids.len());
        for (i, &id) in set.image_ids.iter().enumerate() {
            let name = file_name(id, checkpoint);
            write(&dir.join(&name), &encode(&set.deltas[c][i]))?;
            row.push(name);
        }
        files.push(row);
    }
    let shape = set.final_deltas().first().map(|d| d.shape().to_vec()).unwrap_or_default();
    let manifest = Manifest {
        format: FORMAT.into(),
        attack: set.attack.clone(),
        surrogates: surrogates.to_vec(),
        config: config.clone(),
        shape,
        checkpoints: set.checkpoints.clone(),
        image_ids: set.image_ids.clone(),
        targets: set.targets.clone(),
        white_box: set.white_box.clone(),
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Manifest, SnapshotSet)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read(&path)
        .with_context(|| format!("cannot read snapshot manifest {}", path.display()))
        .kind(Kind::Data)?;
    let m: Manifest = serde_json::from_slice(&text)
        .with_context(|| format!("invalid snapshot manifest {}", path.display()))
        .kind(Kind::Data)?;
    if m.format != FORMAT {
        return Err(bail(Kind::Data, format!("{}: unsupported format {:?}", path.display(), m.format)));
    }
    let n = m.image_ids.len();
    if m.targets.len() != n || m.white_box.len() != n || m.files.len() != m.checkpoints.len() || m.files.iter().any(|r| r.len() != n) {
        return Err(bail(Kind::Data, format!("{}: inconsistent entry counts", path.display())));
    }
    let numel: usize = m.shape.iter().product();
    let mut deltas = Vec::with_capacity(m.files.len());
    for row in &m.files {
        let mut out = Vec::with_capacity(n);
        for name in row {
            let file = dir.join(name);
            let bytes = std::fs::read(&file)
                .with_context(|| format!("cannot read snapshot {}", file.display()))
                .kind(Kind::Data)?;
            if bytes.len() != numel * 4 {
                return Err(bail(
                    Kind::Data,
                    format!("{}: {} bytes, expected {} for shape {:?}", file.display(), bytes.len(), numel * 4, m.shape),
                ));
            }
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk"))).collect();
            out.push(Tensor::new(m.shape.clone(), data).kind(Kind::Data)?);
        }
        deltas.push(out);
    }
    let set = SnapshotSet {
        surrogate: m.surrogates.join("+"),
        attack: m.attack.clone(),
        seed: m.config.seed,
        checkpoints: m.checkpoints.clone(),
        image_ids: m.image_ids.clone(),
        targets: m.targets.clone(),
        deltas,
        white_box: m.white_box.clone(),
    };
    Ok((m, set))
}

/// Every archive directory under `root`, sorted by name.
pub fn list(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(bail(Kind::Data, format!("no snapshots under {}; run `advlab attack` first", root.display())))
        }
        Err(e) => return Err(e).with_context(|| format!("cannot list {}", root.display())).kind(Kind::Data),
    };
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("cannot list {}", root.display())).kind(Kind::Data)?;
        if entry.path().join(MANIFEST).is_file() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(bail(Kind::Data, format!("no snapshots under {}; run `advlab attack` first", root.display())));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> SnapshotSet {
        let d = |v: f32| Tensor::new(vec![1, 2, 2], vec![v, -v, 0.5 * v, 1e-7]).unwrap();
        SnapshotSet {
            surrogate: "A+B".into(),
            attack: "quick".into(),
            seed: 5,
            checkpoints: vec![2, 4],
            image_ids: vec![7, 3],
            targets: vec![1, 0],
            deltas: vec![vec![d(0.01), d(0.02)], vec![d(0.03), d(-0.06)]],
            white_box: vec![true, false],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(archive_name("quick", &["A".into(), "B".into()]));
        let cfg = AttackConfig { seed: 5, ..AttackConfig::preset("ifgsm").unwrap() };
        save(&path, &set(), &["A".into(), "B".into()], &cfg).unwrap();
        let (m, back) = load(&path).unwrap();
        assert_eq!(back, set());
        assert_eq!(m.files[1][0], "deltas/img000007_it0004.f32");
        assert_eq!(list(dir.path()).unwrap(), vec![path.clone()]);
        std::fs::write(path.join(&m.files[0][1]), [0u8; 3]).unwrap();
        let err = load(&path).unwrap_err();
        assert_eq!(crate::failure::classify(&err), Kind::Data);
        assert_eq!(crate::failure::classify(&list(&dir.path().join("none")).unwrap_err()), Kind::Data);
    }
}
