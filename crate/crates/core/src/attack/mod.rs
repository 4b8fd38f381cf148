//! Targeted iterative attacks: I-FGSM, DTMI and the local-branch
//! extension with feature similarity, for one model or an ensemble.
//!
//! All drivers minimize one composite scalar and subtract `α·sign(g)`, so
//! the sign convention is applied exactly once.

pub mod config;
pub mod driver;
pub mod gradient;

pub use config::{AttackConfig, LossKind, PRESETS};
pub use driver::{attack, ensemble_attack, AdvResult, AttackOptions, IterationRecord, Member, Observer};
pub use gradient::{
    classification_loss, li_gradient, li_gradient_frozen, li_objective, mi_update, step_and_clip, BranchDraws,
    LiGradient, MomentumState,
};
