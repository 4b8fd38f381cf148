use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::transforms::{CropScale, DiParams, TiParams};

/// Targeted classification loss, minimized by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Softmax cross-entropy to the target class.
    Ce,
    /// Negative target logit.
    Logit,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "logit" => Ok(LossKind::Logit),
            _ => Err(Error::invalid(format!("unknown loss kind {s:?} (expected ce or logit)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Logit => "logit",
        })
    }
}

/// Every knob of the iterative attacks. Budgets are in `[0, 1]` pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub mu: f64,
    pub di: DiParams,
    /// Gaussian gradient smoothing; `None` is the identity kernel.
    pub ti: Option<TiParams>,
    pub scale: CropScale,
    pub lambda: f64,
    pub tap: usize,
    pub loss: LossKind,
    pub enable_local: bool,
    pub seed: u64,
}

pub const PRESETS: [&str; 5] = ["ifgsm", "dtmi-ce", "dtmi-logit", "dtmi-ce-li", "dtmi-logit-li"];

impl Default for AttackConfig {
    /// DTMI with cross-entropy.
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            alpha: 2.0 / 255.0,
            iterations: 300,
            mu: 1.0,
            di: DiParams::default(),
            ti: Some(TiParams { radius: 2, sigma: 3.0 }),
            scale: CropScale::default(),
            lambda: 0.4,
            tap: 3,
            loss: LossKind::Ce,
            enable_local: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// One of [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "ifgsm" => Self {
                mu: 0.0,
                di: DiParams { p: 0.0, ..base.di },
                ti: None,
                lambda: 0.0,
                ..base
            },
            "dtmi-ce" => base,
            "dtmi-logit" => Self { loss: LossKind::Logit, ..base },
            "dtmi-ce-li" => Self { enable_local: true, ..base },
            "dtmi-logit-li" => Self {
                loss: LossKind::Logit,
                enable_local: true,
                ..base
            },
            _ => {
                return Err(Error::invalid(format!(
                    "unknown attack {name:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.epsilon.is_finite() && self.epsilon >= 0.0, "epsilon must be ≥ 0, got {}", self.epsilon);
        ensure_arg!(self.alpha.is_finite() && self.alpha > 0.0, "alpha must be > 0, got {}", self.alpha);
        ensure_arg!(self.iterations >= 1, "iterations must be ≥ 1");
        ensure_arg!(self.mu.is_finite() && self.mu >= 0.0, "mu must be ≥ 0, got {}", self.mu);
        ensure_arg!(self.lambda.is_finite() && self.lambda >= 0.0, "lambda must be ≥ 0, got {}", self.lambda);
        ensure_arg!((1..=4).contains(&self.tap), "tap must be in 1..=4, got {}", self.tap);
        self.di.validate()?;
        self.scale.validate()?;
        if let Some(ti) = self.ti {
            ensure_arg!(ti.sigma > 0.0, "TI sigma must be > 0, got {}", ti.sigma);
        }
        Ok(())
    }
}
