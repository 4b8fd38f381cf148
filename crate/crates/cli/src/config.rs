//! The JSON run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advlab::attack::{AttackConfig, PRESETS};
use advlab::eval::ReportFormat;
use advlab::train::TrainHyper;
use advlab::zoo::Architecture;
use anyhow::{Context, Result};
use serde::Deserialize;

use crate::failure::{bail, Classify, Kind};

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase", tag = "format", deny_unknown_fields)]
pub enum DatasetSource {
    /// CIFAR-10 binary batches; relative paths resolve against
    /// `ADVLAB_DATA_DIR`, else the config file's directory.
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
    /// IDX image/label pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// The procedural ten-class shape set.
    Synthetic {
        train_size: usize,
        test_size: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(try_from = "serde_json::Map<String, serde_json::Value>")]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Number of test images attacked and evaluated.
    pub eval_subset: usize,
    /// `subset_seed`: seeds the evaluation subset and target draw; defaults to the global seed.
    pub seed: Option<u64>,
}

// `flatten` would disable unknown-field checks, so the shared keys are split off by hand.
impl TryFrom<serde_json::Map<String, serde_json::Value>> for DatasetConfig {
    type Error = serde_json::Error;

    fn try_from(mut map: serde_json::Map<String, serde_json::Value>) -> Result<Self, Self::Error> {
        use serde::de::Error;
        let eval_subset = map.remove("eval_subset").ok_or_else(|| Self::Error::missing_field("eval_subset"))?;
        let seed = map.remove("subset_seed").filter(|v| !v.is_null());
        Ok(Self {
            eval_subset: serde_json::from_value(eval_subset)?,
            seed: seed.map(serde_json::from_value).transpose()?,
            source: serde_json::from_value(serde_json::Value::Object(map))?,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub arch: String,
    /// Initialization and shuffling seed; defaults to the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "yes")]
    pub universality: bool,
    #[serde(default = "default_taps")]
    pub dominance_taps: Vec<usize>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_checkpoints() -> Vec<usize> {
    vec![20, 100, 300]
}

fn yes() -> bool {
    true
}

fn default_taps() -> Vec<usize> {
    vec![3]
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            checkpoints: default_checkpoints(),
            universality: true,
            dominance_taps: default_taps(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub models: Vec<ModelConfig>,
    /// Named attacks: an optional `preset` plus overriding fields. The five
    /// presets are also available under their own names.
    #[serde(default)]
    pub attacks: BTreeMap<String, serde_json::Map<String, serde_json::Value>>,
    #[serde(default)]
    pub eval: EvalPlan,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Directory relative dataset paths fall back to.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .kind(Kind::Config)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .kind(Kind::Config)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Check every cross-reference and every component invariant.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(bail(Kind::Config, "config lists no models"));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return Err(bail(Kind::Config, format!("model name {:?} appears twice", m.name)));
            }
            if m.name.is_empty() || m.name.contains(['/', '+', '\\']) {
                return Err(bail(Kind::Config, format!("model name {:?} must be non-empty without '/', '\\\\' or '+'", m.name)));
            }
            m.arch.parse::<Architecture>().kind(Kind::Config)?;
            m.hyper.validate().with_context(|| format!("model {}", m.name)).kind(Kind::Config)?;
            if m.hyper.seed != 0 {
                return Err(bail(Kind::Config, format!("model {}: set the seed with `seed`, not `hyper.seed`", m.name)));
            }
        }
        for name in self.attacks.keys() {
            self.attack(name)?;
        }
        if self.eval.checkpoints.iter().any(|&c| c == 0) {
            return Err(bail(Kind::Config, "checkpoints must be ≥ 1"));
        }
        if let Some(&t) = self.eval.dominance_taps.iter().find(|t| !(1..=4).contains(*t)) {
            return Err(bail(Kind::Config, format!("dominance tap {t} outside 1..=4")));
        }
        self.formats()?;
        if self.threads == Some(0) {
            return Err(bail(Kind::Config, "threads must be ≥ 1"));
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<&ModelConfig> {
        self.models.iter().find(|m| m.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
            bail(Kind::Config, format!("unknown model {name:?} (config defines {})", known.join(", ")))
        })
    }

    pub fn model_seed(&self, m: &ModelConfig) -> u64 {
        m.seed.unwrap_or(self.seed)
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// Resolve an attack name to its configuration. The global seed seeds
    /// the attack unless the entry sets its own.
    pub fn attack(&self, name: &str) -> Result<AttackConfig> {
        let (preset, overrides) = match self.attacks.get(name) {
            Some(entry) => {
                let preset = match entry.get("preset") {
                    Some(serde_json::Value::String(p)) => p.clone(),
                    Some(other) => return Err(bail(Kind::Config, format!("attack {name}: preset must be a string, got {other}"))),
                    None => "dtmi-ce".to_string(),
                };
                let mut o = entry.clone();
                o.remove("preset");
                (preset, o)
            }
            None if PRESETS.contains(&name) => (name.to_string(), serde_json::Map::new()),
            None => {
                let mut known: Vec<&str> = PRESETS.to_vec();
                known.extend(self.attacks.keys().map(String::as_str));
                return Err(bail(Kind::Config, format!("unknown attack {name:?} (expected one of {})", known.join(", "))));
            }
        };
        let base = AttackConfig::preset(&preset).with_context(|| format!("attack {name}")).kind(Kind::Config)?;
        let mut value = serde_json::to_value(AttackConfig { seed: self.seed, ..base })?;
        let object = value.as_object_mut().expect("AttackConfig serializes to an object");
        for (k, v) in overrides {
            object.insert(k, v);
        }
        let cfg: AttackConfig = serde_json::from_value(value).with_context(|| format!("attack {name}")).kind(Kind::Config)?;
        cfg.validate().with_context(|| format!("attack {name}")).kind(Kind::Config)?;
        Ok(cfg)
    }

    pub fn formats(&self) -> Result<Vec<ReportFormat>> {
        if self.eval.formats.is_empty() {
            return Err(bail(Kind::Config, "eval.formats is empty"));
        }
        self.eval.formats.iter().map(|f| f.parse::<ReportFormat>().kind(Kind::Config)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(json).kind(Kind::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    const BASE: &str = r#"{
        "dataset": {"format": "synthetic", "train_size": 16, "test_size": 8, "eval_subset": 4},
        "models": [{"name": "A", "arch": "ConvNetA", "hyper": {"epochs": 1}}],
        "attacks": {"quick": {"preset": "dtmi-ce-li", "iterations": 5, "seed": 9}},
        "seed": 3
    }"#;

    #[test]
    fn presets_and_overrides_resolve() {
        let cfg = parse(BASE).unwrap();
        let quick = cfg.attack("quick").unwrap();
        assert_eq!((quick.iterations, quick.seed, quick.enable_local), (5, 9, true));
        let li = cfg.attack("dtmi-ce-li").unwrap();
        assert_eq!(li.iterations, 300);
        assert_eq!(li.lambda, 0.4);
        assert_eq!(li.tap, 3);
        assert_eq!(li.seed, 3);
        let ifgsm = cfg.attack("ifgsm").unwrap();
        assert!(ifgsm.mu == 0.0 && ifgsm.di.p == 0.0 && ifgsm.ti.is_none() && !ifgsm.enable_local);
        assert_eq!(cfg.model_seed(&cfg.models[0]), 3);
        assert_eq!(cfg.eval.checkpoints, vec![20, 100, 300]);
    }

    #[test]
    fn bad_references_are_config_errors() {
        let cfg = parse(BASE).unwrap();
        assert!(parse(&BASE.replace("\"eval_subset\": 4", "\"eval_subset\": 4, \"colour\": 1")).is_err());
        assert!(parse(&BASE.replace("\"eval_subset\": 4", "\"test_size\": 4")).is_err());
        let e = cfg.attack("pgd").unwrap_err();
        assert_eq!(crate::failure::classify(&e), Kind::Config);
        assert!(cfg.model("B").is_err());
        let bad = BASE.replace("\"iterations\": 5", "\"iterations\": 0");
        assert!(parse(&bad).is_err());
        let bad = BASE.replace("ConvNetA", "VGG16");
        assert_eq!(crate::failure::classify(&parse(&bad).unwrap_err()), Kind::Config);
        let bad = BASE.replace("\"seed\": 3", "\"sed\": 3");
        assert!(parse(&bad).is_err());
        let bad = BASE.replace("\"iterations\": 5", "\"iteratons\": 5");
        assert!(parse(&bad).is_err());
    }
}
