use std::path::{Path, PathBuf};

use advlab::data::{parse_cifar10, parse_idx, read_file, resolve_data_path, synthetic, Dataset};
use anyhow::{Context, Result};

use crate::config::{DatasetSource, RunConfig};
use crate::failure::{bail, Classify, Kind};

/// Train and test splits sharing one class count.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// The attacked images: a seeded subset of the test split.
pub struct EvalSet {
    pub ids: Vec<usize>,
    pub images: Vec<advlab::Tensor<f32>>,
    pub targets: Vec<usize>,
}

fn read(path: &Path, base: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let resolved = resolve_data_path(path, base);
    let bytes = read_file(&resolved).kind(Kind::Data)?;
    Ok((resolved, bytes))
}

fn cifar(paths: &[PathBuf], base: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    for p in paths {
        let (resolved, bytes) = read(p, base)?;
        let ds = parse_cifar10(&bytes)
            .with_context(|| format!("parsing {}", resolved.display()))
            .kind(Kind::Data)?;
        records.extend_from_slice(ds.records());
    }
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    Dataset::new(records, 10, format!("cifar10({})", names.join(","))).kind(Kind::Data)
}

fn idx(images: &Path, labels: &Path, base: &Path) -> Result<Dataset> {
    let (ipath, ibytes) = read(images, base)?;
    let (lpath, lbytes) = read(labels, base)?;
    parse_idx(&ibytes, &lbytes)
        .with_context(|| format!("parsing {} with {}", ipath.display(), lpath.display()))
        .kind(Kind::Data)
}

impl Splits {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let base = &cfg.base_dir;
        let (train, test) = match &cfg.dataset.source {
            DatasetSource::Cifar10 { train, test } => {
                if train.is_empty() {
                    return Err(bail(Kind::Config, "dataset.train lists no files"));
                }
                (cifar(train, base)?, cifar(std::slice::from_ref(test), base)?)
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = idx(train_images, train_labels, base)?;
                let test = idx(test_images, test_labels, base)?;
                let k = train.num_classes().max(test.num_classes());
                (train.with_num_classes(k).kind(Kind::Data)?, test.with_num_classes(k).kind(Kind::Data)?)
            }
            DatasetSource::Synthetic { train_size, test_size, seed } => (
                synthetic::generate(*train_size, *seed).kind(Kind::Data)?,
                synthetic::generate(*test_size, seed.wrapping_add(1)).kind(Kind::Data)?,
            ),
        };
        if train.is_empty() || test.is_empty() {
            return Err(bail(Kind::Data, "train and test splits must both be non-empty"));
        }
        if train.image_shape() != test.image_shape() {
            return Err(bail(
                Kind::Data,
                format!("train images are {:?} but test images are {:?}", train.image_shape(), test.image_shape()),
            ));
        }
        Ok(Self { train, test })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.train.image_shape().expect("non-empty split")
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    /// Subset ids index the test split; targets are drawn over the whole
    /// test split so they do not depend on the subset size.
    pub fn eval_set(&self, n: usize, seed: u64) -> Result<EvalSet> {
        if n == 0 {
            return Err(bail(Kind::Config, "dataset.eval_subset must be ≥ 1"));
        }
        let targets = advlab::data::assign_targets(&self.test, seed).kind(Kind::Config)?.targets;
        let ids = self.test.eval_subset_indices(n, seed);
        let records = self.test.records();
        Ok(EvalSet {
            images: ids.iter().map(|&i| records[i].pixels.clone()).collect(),
            targets: ids.iter().map(|&i| targets[i]).collect(),
            ids,
        })
    }
}
