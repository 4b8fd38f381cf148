//! Losses and the single/two-branch attack gradient.

use crate::attack::config::{AttackConfig, LossKind};
use crate::error::{ensure_arg, Result};
use crate::nn::{cosine_similarity, softmax_cross_entropy};
use crate::tensor::{l1_norm, Real, Tensor};
use crate::transforms::{
    di_adjoint, di_apply, loc_apply, ti_smooth, Branch, DiTrace, LocTrace, RngStream, StreamKey, TiKernel,
};
use crate::zoo::{ForwardTrace, Model, TapGradient};

/// Loss value and its gradient with respect to the logits.
pub fn classification_loss<T: Real>(logits: &[T], target: usize, kind: LossKind) -> Result<(T, Vec<T>)> {
    match kind {
        LossKind::Ce => softmax_cross_entropy(logits, target),
        LossKind::Logit => {
            ensure_arg!(
                target < logits.len(),
                "target class {target} out of range for {} logits",
                logits.len()
            );
            let mut grad = vec![T::zero(); logits.len()];
            grad[target] = -T::one();
            Ok((-logits[target], grad))
        }
    }
}

/// The random draws of one iteration, shared by every ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchDraws {
    pub global_di: DiTrace,
    pub local_di: DiTrace,
    /// Crop of the local branch; `None` when the local branch is disabled.
    pub loc: Option<LocTrace>,
}

impl BranchDraws {
    /// Draws keyed by `(cfg.seed, image, iteration)` and the branch tag.
    pub fn draw(cfg: &AttackConfig, shape: &[usize], image: u64, iteration: u64) -> Result<Self> {
        ensure_arg!(shape.len() == 3, "image must be C×H×W, got {shape:?}");
        let (h, w) = (shape[1], shape[2]);
        let key = StreamKey::new(cfg.seed, image, iteration, Branch::GlobalDi);
        let global_di = DiTrace::draw(h, w, &cfg.di, &mut RngStream::new(key))?;
        if !cfg.enable_local {
            return Ok(Self {
                global_di,
                local_di: DiTrace::identity(),
                loc: None,
            });
        }
        let local_di = DiTrace::draw(h, w, &cfg.di, &mut RngStream::new(key.with_branch(Branch::LocalDi)))?;
        let loc = LocTrace::draw(h, w, &cfg.scale, &mut RngStream::new(key.with_branch(Branch::Loc)))?;
        Ok(Self {
            global_di,
            local_di,
            loc: Some(loc),
        })
    }
}

/// Gradient of the composite objective with respect to δ, plus its parts.
#[derive(Debug, Clone)]
pub struct LiGradient<T> {
    pub grad: Tensor<T>,
    /// Value of the composite objective.
    pub objective: T,
    pub loss_global: T,
    pub loss_local: Option<T>,
    /// Tap-feature cosine similarity between the branches.
    pub cs: Option<T>,
    /// Set when a tap feature had zero norm and the similarity term was dropped.
    pub degenerate: bool,
}

struct BranchInputs<T> {
    global: Tensor<T>,
    local: Option<Tensor<T>>,
}

fn branch_inputs<T: Real>(x: &Tensor<T>, delta: &Tensor<T>, draws: &BranchDraws) -> Result<BranchInputs<T>> {
    ensure_arg!(
        x.shape() == delta.shape(),
        "image {:?} and perturbation {:?} shapes differ",
        x.shape(),
        delta.shape()
    );
    let global = di_apply(&x.add(delta)?, &draws.global_di)?;
    let local = match draws.loc {
        Some(loc) => Some(di_apply(&loc_apply(x, &loc)?.add(delta)?, &draws.local_di)?),
        None => None,
    };
    Ok(BranchInputs { global, local })
}

/// The composite objective alone, for the recorded draws:
/// `J(f(T(x+δ))) + J(f(T(Loc(x)+δ))) − λ·CS(f_l(T(x+δ)), f_l(T(Loc(x)+δ)))`,
/// or just the first term when the local branch is disabled.
pub fn li_objective<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    target: usize,
    cfg: &AttackConfig,
    tap: usize,
    draws: &BranchDraws,
) -> Result<T> {
    let inputs = branch_inputs(x, delta, draws)?;
    let (logits_g, feat_g) = model.forward_with_taps(&inputs.global, tap)?;
    let (mut value, _) = classification_loss(&logits_g, target, cfg.loss)?;
    if let Some(local) = &inputs.local {
        let (logits_l, feat_l) = model.forward_with_taps(local, tap)?;
        value += classification_loss(&logits_l, target, cfg.loss)?.0;
        let cs = cosine_similarity(feat_g.data(), feat_l.data())?;
        value -= T::lit(cfg.lambda) * cs.score;
    }
    Ok(value)
}

/// [`li_gradient`] with explicitly supplied draws.
pub fn li_gradient_frozen<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    target: usize,
    cfg: &AttackConfig,
    tap: usize,
    draws: &BranchDraws,
) -> Result<LiGradient<T>> {
    let inputs = branch_inputs(x, delta, draws)?;
    let layer = model.spec().tap_layer(tap)?;
    let trace_g = model.forward_trace(&inputs.global)?;
    let (loss_global, up_g) = classification_loss(trace_g.logits(), target, cfg.loss)?;

    let Some(local) = &inputs.local else {
        let back = model.backward(&trace_g, &up_g, None, false)?;
        return Ok(LiGradient {
            grad: di_adjoint(&back.input, &draws.global_di)?,
            objective: loss_global,
            loss_global,
            loss_local: None,
            cs: None,
            degenerate: false,
        });
    };

    let trace_l = model.forward_trace(local)?;
    let (loss_local, up_l) = classification_loss(trace_l.logits(), target, cfg.loss)?;
    let feat_g = trace_g.output(layer);
    let feat_l = trace_l.output(layer);
    let cs = cosine_similarity(feat_g.data(), feat_l.data())?;
    let lambda = T::lit(cfg.lambda);
    // The objective subtracts λ·CS, so both injected gradients carry −λ.
    let inject = |g: Vec<T>, like: &Tensor<T>| Tensor::new(like.shape().to_vec(), g.into_iter().map(|v| -lambda * v).collect());
    let use_cs = cfg.lambda != 0.0 && !cs.degenerate;
    let (inj_g, inj_l) = if use_cs {
        (Some(inject(cs.grad_a, feat_g)?), Some(inject(cs.grad_b, feat_l)?))
    } else {
        (None, None)
    };
    let back_branch = |trace: &ForwardTrace<T>, up: &[T], inj: &Option<Tensor<T>>, di: &DiTrace| -> Result<Tensor<T>> {
        let feature = inj.as_ref().map(|grad| TapGradient { tap, grad });
        di_adjoint(&model.backward(trace, up, feature, false)?.input, di)
    };
    let mut grad = back_branch(&trace_g, &up_g, &inj_g, &draws.global_di)?;
    grad.add_assign(&back_branch(&trace_l, &up_l, &inj_l, &draws.local_di)?)?;
    Ok(LiGradient {
        grad,
        objective: loss_global + loss_local - lambda * cs.score,
        loss_global,
        loss_local: Some(loss_local),
        cs: Some(cs.score),
        degenerate: cs.degenerate,
    })
}

/// Gradient of the composite objective with respect to δ, drawing this
/// iteration's DI and crop randomness from the `(seed, image, iteration)` key.
pub fn li_gradient<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    target: usize,
    cfg: &AttackConfig,
    image: u64,
    iteration: u64,
) -> Result<LiGradient<T>> {
    let draws = BranchDraws::draw(cfg, x.shape(), image, iteration)?;
    li_gradient_frozen(model, x, delta, target, cfg, cfg.tap, &draws)
}

/// Accumulated momentum `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<T> {
    pub g: Tensor<T>,
}

impl<T: Real> MomentumState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { g: Tensor::zeros(shape) }
    }
}

/// `g ← μ·g + W∗∇ / ‖W∗∇‖₁`; the normalized term is zero when its norm is.
pub fn mi_update<T: Real>(state: &mut MomentumState<T>, raw: &Tensor<T>, mu: f64, kernel: &TiKernel) -> Result<()> {
    ensure_arg!(
        state.g.shape() == raw.shape(),
        "momentum {:?} and gradient {:?} shapes differ",
        state.g.shape(),
        raw.shape()
    );
    let smooth = if kernel.is_identity() { raw.clone() } else { ti_smooth(raw, kernel)? };
    let norm = l1_norm(&smooth);
    let mu = T::lit(mu);
    let inv = if norm > T::zero() && norm.is_finite() { T::one() / norm } else { T::zero() };
    for (g, &s) in state.g.data_mut().iter_mut().zip(smooth.data()) {
        *g = mu * *g + if inv == T::zero() { T::zero() } else { s * inv };
    }
    Ok(())
}

/// `δ' = clamp(δ − α·sign(g), −ε, ε)`, then clamped so `x + δ' ∈ [0, 1]`.
pub fn step_and_clip<T: Real>(delta: &Tensor<T>, g: &Tensor<T>, alpha: T, epsilon: T, x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_arg!(
        delta.shape() == g.shape() && delta.shape() == x.shape(),
        "step_and_clip shapes differ: δ {:?}, g {:?}, x {:?}",
        delta.shape(),
        g.shape(),
        x.shape()
    );
    let data = delta
        .data()
        .iter()
        .zip(g.data())
        .zip(x.data())
        .map(|((&d, &gv), &xv)| {
            let step = if gv > T::zero() {
                d - alpha
            } else if gv < T::zero() {
                d + alpha
            } else {
                d
            };
            let d = step.max(-epsilon).min(epsilon);
            d.max(-xv).min(T::one() - xv)
        })
        .collect();
    Tensor::new(delta.shape().to_vec(), data)
}
