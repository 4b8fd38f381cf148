//! The iterative attack loop for one surrogate or an ensemble.

use crate::attack::config::AttackConfig;
use crate::attack::gradient::{li_gradient_frozen, mi_update, step_and_clip, BranchDraws, MomentumState};
use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};
use crate::transforms::TiKernel;
use crate::zoo::Model;

/// A white-box model and the tap its similarity term reads.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a, T> {
    pub model: &'a Model<T>,
    pub tap: usize,
}

/// What to record besides the final perturbation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttackOptions {
    /// Iteration counts (1-based, ≤ I) after which δ is snapshotted.
    pub checkpoints: Vec<usize>,
    /// Record per-iteration losses and white-box success.
    pub telemetry: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration count.
    pub iteration: usize,
    /// Composite objective averaged over members, before the step.
    pub objective: f64,
    pub cs: Option<f64>,
    /// White-box success after the step.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvResult<T> {
    pub delta: Tensor<T>,
    pub x_adv: Tensor<T>,
    /// Every member classifies `x_adv` as the target.
    pub success: bool,
    pub iterations: usize,
    /// `(iteration, δ)` for each requested checkpoint, ascending.
    pub snapshots: Vec<(usize, Tensor<T>)>,
    pub telemetry: Vec<IterationRecord>,
    /// First iteration after which the attack succeeded, when telemetry is on.
    pub first_success: Option<usize>,
}

/// Called after every iteration with `(iteration, δ)`.
pub type Observer<'o, T> = &'o mut dyn FnMut(usize, &Tensor<T>);

fn classified_as<T: Real>(members: &[Member<'_, T>], x: &Tensor<T>, target: usize) -> Result<bool> {
    for m in members {
        if m.model.predict(x)? != target {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Targeted attack of one image against one surrogate.
pub fn attack<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    target: usize,
    cfg: &AttackConfig,
    image: u64,
    opts: &AttackOptions,
) -> Result<AdvResult<T>> {
    ensemble_attack(&[Member { model, tap: cfg.tap }], x, target, cfg, image, opts, None)
}

/// Targeted attack against several surrogates: each iteration steps along
/// the unweighted mean of the members' composite-objective gradients.
pub fn ensemble_attack<T: Real>(
    members: &[Member<'_, T>],
    x: &Tensor<T>,
    target: usize,
    cfg: &AttackConfig,
    image: u64,
    opts: &AttackOptions,
    mut observer: Option<Observer<'_, T>>,
) -> Result<AdvResult<T>> {
    cfg.validate()?;
    ensure_arg!(!members.is_empty(), "ensemble attack needs at least one model");
    let first = members[0].model.spec();
    for m in members {
        let s = m.model.spec();
        ensure_arg!(
            s.input_shape == first.input_shape && s.num_classes == first.num_classes,
            "ensemble members disagree on input shape or class count ({} vs {})",
            s.name,
            first.name
        );
        s.tap_layer(m.tap)?;
    }
    ensure_arg!(
        x.shape() == first.input_shape,
        "image shape {:?} does not match model input {:?}",
        x.shape(),
        first.input_shape
    );
    ensure_arg!(target < first.num_classes, "target {target} out of range for {} classes", first.num_classes);
    ensure_arg!(
        x.data().iter().all(|&v| v >= T::zero() && v <= T::one()),
        "image pixels must lie in [0, 1]"
    );
    let mut checkpoints = opts.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    for &c in &checkpoints {
        ensure_arg!(
            (1..=cfg.iterations).contains(&c),
            "checkpoint {c} outside 1..={}",
            cfg.iterations
        );
    }

    let kernel = TiKernel::from_params(cfg.ti)?;
    let alpha = T::lit(cfg.alpha);
    let epsilon = T::lit(cfg.epsilon);
    let scale = T::lit(1.0 / members.len() as f64);
    let mut delta = Tensor::zeros(x.shape());
    let mut momentum = MomentumState::zeros(x.shape());
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    let mut telemetry = Vec::new();
    let mut first_success = None;
    let mut next_checkpoint = checkpoints.iter().peekable();

    for i in 0..cfg.iterations {
        let draws = BranchDraws::draw(cfg, x.shape(), image, i as u64)?;
        let mut grad = Tensor::zeros(x.shape());
        let mut objective = 0.0;
        let mut cs_sum = None;
        for m in members {
            let g = li_gradient_frozen(m.model, x, &delta, target, cfg, m.tap, &draws)?;
            grad.add_assign(&g.grad)?;
            objective += g.objective.as_f64();
            if let Some(cs) = g.cs {
                *cs_sum.get_or_insert(0.0) += cs.as_f64();
            }
        }
        if members.len() > 1 {
            grad = grad.scale(scale);
        }
        mi_update(&mut momentum, &grad, cfg.mu, &kernel)?;
        delta = step_and_clip(&delta, &momentum.g, alpha, epsilon, x)?;

        let done = i + 1;
        if opts.telemetry {
            let success = classified_as(members, &x.add(&delta)?, target)?;
            if success && first_success.is_none() {
                first_success = Some(done);
            }
            let n = members.len() as f64;
            telemetry.push(IterationRecord {
                iteration: done,
                objective: objective / n,
                cs: cs_sum.map(|c| c / n),
                success,
            });
        }
        if next_checkpoint.peek() == Some(&&done) {
            next_checkpoint.next();
            snapshots.push((done, delta.clone()));
        }
        if let Some(obs) = observer.as_mut() {
            obs(done, &delta);
        }
    }

    let x_adv = x.add(&delta)?;
    let success = classified_as(members, &x_adv, target)?;
    Ok(AdvResult {
        delta,
        x_adv,
        success,
        iterations: cfg.iterations,
        snapshots,
        telemetry,
        first_success,
    })
}
