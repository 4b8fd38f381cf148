use std::io::Write;
use std::path::{Path, PathBuf};

use advlab::eval::{
    emit_report, feature_dominance_many, generate_snapshots, score_snapshots, transfer_rows, universality_counts, NamedModel,
};
use advlab::train::{eval_accuracy, train};
use advlab::zoo::{load_checkpoint, save_checkpoint, Architecture, Model, ModelSpec};
use anyhow::{Context, Result};

use crate::archive;
use crate::config::{ModelConfig, RunConfig};
use crate::data::Splits;
use crate::failure::{bail, Classify, Kind};

/// Resolved run context shared by the subcommands.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    fn snapshots_dir(&self) -> PathBuf {
        self.out.join("snapshots")
    }

    fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.models_dir().join(format!("{name}.avlb"))
    }

    fn spec(&self, m: &ModelConfig, splits: &Splits) -> Result<ModelSpec> {
        let arch: Architecture = m.arch.parse().kind(Kind::Config)?;
        arch.spec(splits.num_classes(), splits.input_shape()).kind(Kind::Config)
    }

    fn load_model(&self, name: &str, splits: &Splits) -> Result<Model<f32>> {
        let m = self.cfg.model(name)?;
        let path = self.checkpoint_path(name);
        if !path.is_file() {
            return Err(bail(
                Kind::Data,
                format!("missing checkpoint {} for model {name}; run `advlab train` first", path.display()),
            ));
        }
        load_checkpoint(&path, &self.spec(m, splits)?)
            .with_context(|| format!("loading model {name}"))
            .kind(Kind::Data)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .kind(Kind::Data)
}

pub fn train_models(run: &Run, only: &[String], out: &mut dyn Write) -> Result<()> {
    for name in only {
        run.cfg.model(name)?;
    }
    let splits = Splits::load(&run.cfg)?;
    create_dir(&run.models_dir())?;
    for m in run.cfg.models.iter().filter(|m| only.is_empty() || only.contains(&m.name)) {
        let spec = run.spec(m, &splits)?;
        let mut hyper = m.hyper.clone();
        hyper.seed = run.cfg.model_seed(m);
        let mut log = Vec::new();
        let model = train(spec, &splits.train, &hyper, &mut |stats, _| {
            let line = stats.log_line();
            eprintln!("[{}] {line}", m.name);
            log.push(line);
        })
        .with_context(|| format!("training model {}", m.name))?;
        let acc = eval_accuracy(&model, &splits.test).with_context(|| format!("evaluating model {}", m.name))?;
        let path = run.checkpoint_path(&m.name);
        save_checkpoint(&model, &path).kind(Kind::Data)?;
        log.push(format!("test accuracy {:.4} ({}/{})", acc.value, acc.correct, acc.total));
        let log_path = run.models_dir().join(format!("{}.log", m.name));
        std::fs::write(&log_path, log.join("\n") + "\n")
            .with_context(|| format!("cannot write {}", log_path.display()))
            .kind(Kind::Data)?;
        writeln!(out, "{}: test accuracy {:.4} -> {}", m.name, acc.value, path.display())?;
    }
    Ok(())
}

pub fn attack(run: &Run, surrogates: &[String], attack: &str, out: &mut dyn Write) -> Result<()> {
    if surrogates.is_empty() {
        return Err(bail(Kind::Config, "attack needs at least one --surrogate"));
    }
    if let Some(dup) = surrogates.iter().enumerate().find(|(i, s)| surrogates[..*i].contains(s)) {
        return Err(bail(Kind::Config, format!("surrogate {} listed twice", dup.1)));
    }
    let cfg = run.cfg.attack(attack)?;
    for s in surrogates {
        run.cfg.model(s)?;
    }
    let splits = Splits::load(&run.cfg)?;
    let models: Vec<Model<f32>> = surrogates.iter().map(|s| run.load_model(s, &splits)).collect::<Result<_>>()?;
    let named: Vec<NamedModel<'_>> = surrogates
        .iter()
        .zip(&models)
        .map(|(name, model)| NamedModel { name, model, tap: cfg.tap })
        .collect();
    let eval = splits.eval_set(run.cfg.dataset.eval_subset, run.cfg.data_seed())?;
    let mut checkpoints: Vec<usize> = run.cfg.eval.checkpoints.iter().copied().filter(|&c| c <= cfg.iterations).collect();
    checkpoints.push(cfg.iterations);
    let set = generate_snapshots(&named, attack, &cfg, &eval.images, &eval.ids, &eval.targets, &checkpoints)
        .with_context(|| format!("running attack {attack}"))?;
    let dir = run.snapshots_dir().join(archive::archive_name(attack, surrogates));
    archive::save(&dir, &set, surrogates, &cfg)?;
    let rate = set.white_box_rate();
    writeln!(
        out,
        "{attack} on {}: white-box success {:.4} ({}/{}) -> {}",
        set.surrogate,
        rate.value,
        rate.hits,
        rate.total,
        dir.display()
    )?;
    Ok(())
}

fn report_stem(kind: &str, m: &archive::Manifest, on: &str) -> String {
    format!("{kind}__{}__{}__on_{on}", m.attack, m.surrogates.join("+"))
}

pub fn evaluate(run: &Run, out: &mut dyn Write) -> Result<()> {
    let formats = run.cfg.formats()?;
    let archives = archive::list(&run.snapshots_dir())?;
    let splits = Splits::load(&run.cfg)?;
    let names: Vec<&str> = run.cfg.models.iter().map(|m| m.name.as_str()).collect();
    let models: Vec<Model<f32>> = names.iter().map(|n| run.load_model(n, &splits)).collect::<Result<_>>()?;
    let records = splits.test.records();
    let reports = run.reports_dir();
    create_dir(&reports)?;
    let mut cells = Vec::new();
    for dir in &archives {
        let (manifest, set) = archive::load(dir)?;
        if let Some(&bad) = set.image_ids.iter().find(|&&i| i >= records.len()) {
            return Err(bail(
                Kind::Data,
                format!("{}: image id {bad} outside the {}-image test split", dir.display(), records.len()),
            ));
        }
        let images: Vec<_> = set.image_ids.iter().map(|&i| records[i].pixels.clone()).collect();
        if images.first().map(|x| x.shape()) != Some(manifest.shape.as_slice()) {
            return Err(bail(Kind::Data, format!("{}: snapshot shape {:?} does not match the dataset", dir.display(), manifest.shape)));
        }
        for (name, model) in names.iter().zip(&models) {
            let victim = NamedModel { name, model, tap: manifest.config.tap };
            cells.push(score_snapshots(&victim, &set, &images)?);
        }
        let final_deltas = set.final_deltas();
        for surrogate in &manifest.surrogates {
            let Some(pos) = names.iter().position(|n| n == surrogate) else {
                return Err(bail(Kind::Config, format!("{}: surrogate {surrogate} is not in the config", dir.display())));
            };
            let model = &models[pos];
            if run.cfg.eval.universality {
                let uni = universality_counts(model, final_deltas, &images, &set.targets, &set.image_ids)?;
                let mean = uni.iter().map(|r| r.count as f64).sum::<f64>() / uni.len().max(1) as f64;
                for &f in &formats {
                    let path = reports.join(format!("{}.{}", report_stem("universality", &manifest, surrogate), f.extension()));
                    emit_report(&uni, f, &path).kind(Kind::Data)?;
                }
                writeln!(out, "universality {} on {surrogate}: mean count {mean:.4}", dir_name(dir))?;
            }
            if !run.cfg.eval.dominance_taps.is_empty() {
                if images.len() < 2 {
                    writeln!(out, "dominance {} skipped: needs at least two images", dir_name(dir))?;
                    continue;
                }
                let successful: Vec<_> =
                    final_deltas.iter().zip(&set.white_box).filter(|(_, &s)| s).map(|(d, _)| d.clone()).collect();
                let deltas = if successful.is_empty() { final_deltas.to_vec() } else { successful };
                let mut dom = Vec::new();
                for &tap in &run.cfg.eval.dominance_taps {
                    dom.push(feature_dominance_many(model, &images, &deltas, tap)?);
                }
                for &f in &formats {
                    let path = reports.join(format!("{}.{}", report_stem("dominance", &manifest, surrogate), f.extension()));
                    emit_report(&dom, f, &path).kind(Kind::Data)?;
                }
                for d in &dom {
                    writeln!(
                        out,
                        "dominance {} on {surrogate} tap {}: benign {:.4} adversarial {:.4}",
                        dir_name(dir),
                        d.tap,
                        d.mean_cs_benign,
                        d.mean_cs_adversarial
                    )?;
                }
            }
        }
    }
    let rows = transfer_rows(&cells);
    for &f in &formats {
        emit_report(&rows, f, &reports.join(format!("transfer.{}", f.extension()))).kind(Kind::Data)?;
    }
    for c in &cells {
        let values: Vec<String> = c.tasr.iter().map(|t| format!("{t:.4}")).collect();
        let ckpts: Vec<String> = c.checkpoints.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "transfer {} {} -> {}: tasr {} at {}{}",
            c.attack,
            c.surrogate,
            c.victim,
            values.join("/"),
            ckpts.join("/"),
            if c.white_box { " (white-box)" } else { "" }
        )?;
    }
    writeln!(out, "reports -> {}", reports.display())?;
    Ok(())
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
