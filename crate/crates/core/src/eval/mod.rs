//! Targeted success rates, transfer matrices, perturbation universality
//! and feature dominance.

mod report;

use rayon::prelude::*;
use serde::Serialize;

pub use report::{emit_report, render_report, transfer_rows, ReportFormat, ReportRecord, TransferRow};

use crate::attack::{ensemble_attack, AttackConfig, AttackOptions, Member};
use crate::error::{ensure_arg, Result};
use crate::nn::cosine_similarity;
use crate::tensor::{clamp, Tensor};
use crate::zoo::Model;

/// A fraction over a finite set; `empty` marks a zero-sized set (value 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
    pub empty: bool,
}

impl Rate {
    pub fn new(hits: usize, total: usize) -> Self {
        Self {
            value: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            hits,
            total,
            empty: total == 0,
        }
    }
}

fn predictions(model: &Model<f32>, images: &[Tensor<f32>]) -> Result<Vec<usize>> {
    images.par_iter().map(|x| model.predict(x)).collect()
}

/// Fraction of `adv_images` the model classifies as their target.
pub fn tasr(model: &Model<f32>, adv_images: &[Tensor<f32>], targets: &[usize]) -> Result<Rate> {
    ensure_arg!(
        adv_images.len() == targets.len(),
        "{} images but {} targets",
        adv_images.len(),
        targets.len()
    );
    let hits = predictions(model, adv_images)?
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(Rate::new(hits, targets.len()))
}

/// A named model for the harness.
#[derive(Debug, Clone, Copy)]
pub struct NamedModel<'a> {
    pub name: &'a str,
    pub model: &'a Model<f32>,
    /// Tap used when this model is a surrogate.
    pub tap: usize,
}

/// Perturbations from one attack run, kept at every checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// Surrogate names joined with `+`.
    pub surrogate: String,
    pub attack: String,
    pub seed: u64,
    pub checkpoints: Vec<usize>,
    /// Caller-side identifier of every image (e.g. its dataset index).
    pub image_ids: Vec<usize>,
    pub targets: Vec<usize>,
    /// `deltas[c][i]`: perturbation of image `i` after `checkpoints[c]` iterations.
    pub deltas: Vec<Vec<Tensor<f32>>>,
    /// White-box success of the final iterate.
    pub white_box: Vec<bool>,
}

impl SnapshotSet {
    pub fn final_deltas(&self) -> &[Tensor<f32>] {
        self.deltas.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `x + δ` at checkpoint position `c`.
    pub fn adversarial(&self, images: &[Tensor<f32>], c: usize) -> Result<Vec<Tensor<f32>>> {
        ensure_arg!(c < self.deltas.len(), "checkpoint position {c} out of range");
        ensure_arg!(
            images.len() == self.deltas[c].len(),
            "{} images for {} snapshots",
            images.len(),
            self.deltas[c].len()
        );
        images.iter().zip(&self.deltas[c]).map(|(x, d)| x.add(d)).collect()
    }

    pub fn white_box_rate(&self) -> Rate {
        Rate::new(self.white_box.iter().filter(|&&s| s).count(), self.white_box.len())
    }
}

/// Attack every image once, snapshotting δ at each checkpoint. Image `i`
/// uses `image_ids[i]` as its randomness key, so subsets replay exactly.
pub fn generate_snapshots(
    surrogates: &[NamedModel<'_>],
    attack: &str,
    cfg: &AttackConfig,
    images: &[Tensor<f32>],
    image_ids: &[usize],
    targets: &[usize],
    checkpoints: &[usize],
) -> Result<SnapshotSet> {
    ensure_arg!(
        images.len() == targets.len() && images.len() == image_ids.len(),
        "images, ids and targets differ in length"
    );
    let mut checkpoints = checkpoints.to_vec();
    if checkpoints.is_empty() {
        checkpoints.push(cfg.iterations);
    }
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let members: Vec<Member<'_, f32>> = surrogates.iter().map(|s| Member { model: s.model, tap: s.tap }).collect();
    let opts = AttackOptions {
        checkpoints: checkpoints.clone(),
        telemetry: false,
    };
    let results: Vec<_> = images
        .par_iter()
        .zip(image_ids.par_iter().zip(targets))
        .map(|(x, (&id, &t))| ensemble_attack(&members, x, t, cfg, id as u64, &opts, None))
        .collect::<Result<_>>()?;
    let mut deltas = vec![Vec::with_capacity(images.len()); checkpoints.len()];
    let mut white_box = Vec::with_capacity(images.len());
    for r in results {
        for (c, (_, d)) in r.snapshots.into_iter().enumerate() {
            deltas[c].push(d);
        }
        white_box.push(r.success);
    }
    Ok(SnapshotSet {
        surrogate: surrogates.iter().map(|s| s.name).collect::<Vec<_>>().join("+"),
        attack: attack.to_string(),
        seed: cfg.seed,
        checkpoints,
        image_ids: image_ids.to_vec(),
        targets: targets.to_vec(),
        deltas,
        white_box,
    })
}

/// One (surrogate, victim, attack) entry with a TASR per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferCell {
    pub surrogate: String,
    pub victim: String,
    pub attack: String,
    pub checkpoints: Vec<usize>,
    pub tasr: Vec<f64>,
    pub n_images: usize,
    pub seed: u64,
    /// The victim is (one of) the surrogate(s).
    pub white_box: bool,
}

/// Evaluate a victim on every checkpoint of a snapshot set.
pub fn score_snapshots(victim: &NamedModel<'_>, set: &SnapshotSet, images: &[Tensor<f32>]) -> Result<TransferCell> {
    let mut tasrs = Vec::with_capacity(set.checkpoints.len());
    for c in 0..set.checkpoints.len() {
        tasrs.push(tasr(victim.model, &set.adversarial(images, c)?, &set.targets)?.value);
    }
    Ok(TransferCell {
        surrogate: set.surrogate.clone(),
        victim: victim.name.to_string(),
        attack: set.attack.clone(),
        checkpoints: set.checkpoints.clone(),
        tasr: tasrs,
        n_images: images.len(),
        seed: set.seed,
        white_box: set.surrogate.split('+').any(|s| s == victim.name),
    })
}

/// Every model attacks as a single surrogate with every attack; each
/// snapshot set is then scored on all models, its own included.
pub fn transfer_matrix(
    models: &[NamedModel<'_>],
    attacks: &[(&str, &AttackConfig)],
    images: &[Tensor<f32>],
    image_ids: &[usize],
    targets: &[usize],
    checkpoints: &[usize],
) -> Result<Vec<TransferCell>> {
    ensure_arg!(models.len() >= 2, "a transfer matrix needs at least two models");
    let mut cells = Vec::new();
    for surrogate in models {
        for &(name, cfg) in attacks {
            let set = generate_snapshots(
                std::slice::from_ref(surrogate),
                name,
                cfg,
                images,
                image_ids,
                targets,
                checkpoints,
            )?;
            for victim in models {
                cells.push(score_snapshots(victim, &set, images)?);
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UniversalityRecord {
    pub perturbation_id: usize,
    pub target: usize,
    pub count: usize,
}

impl ReportRecord for UniversalityRecord {
    const FIELDS: &'static [&'static str] = &["perturbation_id", "target", "count"];
}

/// For every perturbation `δ_j`, the number of other images `i ≠ j` with
/// `argmax f(clamp(x_i + δ_j)) = target_j`; sorted by count descending,
/// ties by id.
pub fn universality_counts(
    model: &Model<f32>,
    perturbations: &[Tensor<f32>],
    images: &[Tensor<f32>],
    targets: &[usize],
    ids: &[usize],
) -> Result<Vec<UniversalityRecord>> {
    ensure_arg!(
        perturbations.len() == images.len() && targets.len() == images.len() && ids.len() == images.len(),
        "perturbations, images, targets and ids differ in length"
    );
    let mut records: Vec<UniversalityRecord> = perturbations
        .par_iter()
        .enumerate()
        .map(|(j, d)| {
            let mut count = 0;
            for (i, x) in images.iter().enumerate() {
                if i != j && model.predict(&clamp(&x.add(d)?, 0.0, 1.0)?)? == targets[j] {
                    count += 1;
                }
            }
            Ok(UniversalityRecord {
                perturbation_id: ids[j],
                target: targets[j],
                count,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| b.count.cmp(&a.count).then(a.perturbation_id.cmp(&b.perturbation_id)));
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceRecord {
    pub tap: usize,
    pub mean_cs_benign: f64,
    pub mean_cs_adversarial: f64,
    pub n_images: usize,
}

impl ReportRecord for DominanceRecord {
    const FIELDS: &'static [&'static str] = &["tap", "mean_cs_benign", "mean_cs_adversarial", "n_images"];
}

fn tap_features(model: &Model<f32>, images: &[Tensor<f32>], tap: usize) -> Result<Vec<Vec<f32>>> {
    images
        .par_iter()
        .map(|x| Ok(model.forward_with_taps(x, tap)?.1.into_data()))
        .collect()
}

fn mean_pairwise_cs(features: &[Vec<f32>]) -> Result<f64> {
    let n = features.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in i + 1..n {
                s += cosine_similarity(&features[i], &features[j])?.score as f64;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(rows.iter().sum::<f64>() / (n * (n - 1) / 2) as f64)
}

/// Mean pairwise tap-feature cosine similarity of the benign images and of
/// the same images with one shared perturbation added (then clamped).
pub fn feature_dominance(model: &Model<f32>, images: &[Tensor<f32>], delta: &Tensor<f32>, tap: usize) -> Result<DominanceRecord> {
    feature_dominance_many(model, images, std::slice::from_ref(delta), tap)
}

/// [`feature_dominance`] averaged over several shared perturbations: the
/// adversarial mean is the average of the per-perturbation means.
pub fn feature_dominance_many(
    model: &Model<f32>,
    images: &[Tensor<f32>],
    deltas: &[Tensor<f32>],
    tap: usize,
) -> Result<DominanceRecord> {
    ensure_arg!(images.len() >= 2, "feature dominance needs at least two images, got {}", images.len());
    ensure_arg!(!deltas.is_empty(), "feature dominance needs at least one perturbation");
    let benign = mean_pairwise_cs(&tap_features(model, images, tap)?)?;
    let mut adv = 0.0;
    for d in deltas {
        let shifted: Vec<Tensor<f32>> = images
            .iter()
            .map(|x| clamp(&x.add(d)?, 0.0, 1.0))
            .collect::<Result<_>>()?;
        adv += mean_pairwise_cs(&tap_features(model, &shifted, tap)?)?;
    }
    Ok(DominanceRecord {
        tap,
        mean_cs_benign: benign,
        mean_cs_adversarial: adv / deltas.len() as f64,
        n_images: images.len(),
    })
}
