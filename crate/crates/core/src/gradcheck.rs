//! Central finite-difference gradient checking.
//!
//! The probes run in `f64`. Analytic gradients computed in `f32` are
//! compared against the same `f64` estimates.

use crate::attack::{classification_loss, LossKind};
use crate::error::Result;
use crate::nn::{cosine_similarity, layer_backward, layer_forward, LayerCache, Op};
use crate::tensor::{Real, Tensor};
use crate::transforms::{Branch, RngStream, StreamKey};
use crate::zoo::{Model, TapGradient, Upstream};

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because every probe step crossed a relu or pooling kink.
    pub skipped: usize,
}

/// Function values and the activation pattern at one input.
pub struct Probe {
    pub values: Vec<f64>,
    pub pattern: Vec<u32>,
}

/// Finite-difference estimates of `∂values[o]/∂x[k]` for sampled `k`.
pub struct FdEstimates {
    pub coords: Vec<usize>,
    /// `None` where every step crossed a kink.
    pub values: Vec<Option<Vec<f64>>>,
}

/// Fourth-order central differences
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` along each `e_k`.
///
/// When a probe changes the activation pattern the step is retried at
/// `h/10`, then `h/100`.
pub fn fd_estimates(eval: &dyn Fn(&[f64]) -> Probe, x: &[f64], coords: &[usize], h: f64) -> FdEstimates {
    let base = eval(x).pattern;
    let mut probe = x.to_vec();
    let values = coords
        .iter()
        .map(|&k| {
            [h, h / 10.0, h / 100.0].into_iter().find_map(|step| {
                let mut at = Vec::with_capacity(4);
                for d in [step, -step, 2.0 * step, -2.0 * step] {
                    probe[k] = x[k] + d;
                    let p = eval(&probe);
                    probe[k] = x[k];
                    if p.pattern != base {
                        return None;
                    }
                    at.push(p.values);
                }
                let n = at[0].len();
                Some((0..n).map(|o| (8.0 * (at[0][o] - at[1][o]) - (at[2][o] - at[3][o])) / (12.0 * step)).collect())
            })
        })
        .collect();
    FdEstimates { coords: coords.to_vec(), values }
}

impl FdEstimates {
    /// Relative error is `|a − fd| / max(|a|, |fd|, floor)` with
    /// `floor = 1e-2 · max|analytic|`, so coordinates whose true value is
    /// negligible next to the gradient's scale are compared absolutely.
    pub fn stats(&self, output: usize, analytic: &[f64]) -> FdStats {
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-2 * scale).max(1e-300);
        let mut stats = FdStats::default();
        for (&k, est) in self.coords.iter().zip(&self.values) {
            let Some(est) = est else {
                stats.skipped += 1;
                continue;
            };
            let (a, fd) = (analytic[k], est[output]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            stats.max_rel = stats.max_rel.max(rel);
            stats.checked += 1;
        }
        stats
    }
}

/// Single-output convenience over [`fd_estimates`].
pub fn fd_check(
    f: &dyn Fn(&[f64]) -> f64,
    pattern: &dyn Fn(&[f64]) -> Vec<u32>,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> FdStats {
    let eval = |v: &[f64]| Probe { values: vec![f(v)], pattern: pattern(v) };
    fd_estimates(&eval, x, coords, h).stats(0, analytic)
}

/// `n` distinct coordinates below `len` (all of them when `n ≥ len`),
/// drawn from a seeded stream.
pub fn sample_coords(seed: u64, len: usize, n: usize) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = RngStream::new(StreamKey::new(seed, len as u64, n as u64, Branch::Other(0)));
    rand::seq::index::sample(rng.rng(), len, n).into_vec()
}

fn stream(seed: u64, salt: u64) -> RngStream {
    RngStream::new(StreamKey::new(seed, salt, 0, Branch::Other(1)))
}

fn uniform_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// One named check against a tolerance.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub stats: FdStats,
    pub tolerance: f64,
}

impl CheckResult {
    /// Coordinates sampled, whether or not they were usable.
    pub fn sampled(&self) -> usize {
        self.stats.checked + self.stats.skipped
    }

    /// Within tolerance, and at most one coordinate in ten lost to kinks.
    pub fn passed(&self) -> bool {
        self.stats.max_rel <= self.tolerance && self.stats.checked * 10 >= self.sampled() * 9
    }
}

fn pattern_of(cache: &LayerCache<f64>) -> Vec<u32> {
    let mut p = Vec::new();
    cache.activation_pattern(&mut p);
    p
}

fn layer_case(name: &str, x: &Tensor<f64>, op: Op<'_, f64>, c_seed: u64, h: f64) -> Result<CheckResult> {
    let (out, cache) = layer_forward(op, x)?;
    let c = uniform_tensor(&mut stream(c_seed, 1), out.shape(), -1.0, 1.0);
    let grads = layer_backward(op, &cache, &c, false)?;
    let eval = |v: &[f64]| {
        let (y, cache) = layer_forward(op, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()).unwrap();
        Probe { values: vec![y.dot(&c).unwrap()], pattern: pattern_of(&cache) }
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let stats = fd_estimates(&eval, x.data(), &coords, h).stats(0, grads.input.data());
    Ok(CheckResult { name: name.to_string(), stats, tolerance: 1e-6 })
}

/// Input gradients of every layer kind in double precision, each against
/// a random linear functional of the output.
pub fn check_layer_kinds(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut r = stream(seed, 0);
    let x = uniform_tensor(&mut r, &[3, 14, 14], -1.0, 1.0);
    let w = uniform_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = vec![0.1, -0.2, 0.3, 0.0];
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 0), (1, 0), (2, 1)] {
        let op = Op::Conv2d { weights: &w, bias: &b, stride, pad };
        out.push(layer_case(&format!("conv stride {stride} pad {pad}"), &x, op, seed, h)?);
    }
    out.push(layer_case("relu", &x, Op::Relu, seed, h)?);
    out.push(layer_case("maxpool", &x, Op::MaxPool2, seed, h)?);
    out.push(layer_case("avgpool", &x, Op::AvgPool2, seed, h)?);
    out.push(layer_case("flatten", &x, Op::Flatten, seed, h)?);
    let other = uniform_tensor(&mut r, &[3, 14, 14], -1.0, 1.0);
    out.push(layer_case("addskip", &x, Op::AddSkip { other: &other }, seed, h)?);
    let v = uniform_tensor(&mut r, &[512], -1.0, 1.0);
    let dw = uniform_tensor(&mut r, &[5, 512], -0.1, 0.1);
    let db = vec![0.5, 0.0, -0.5, 0.25, 1.0];
    out.push(layer_case("dense", &v, Op::Dense { weights: &dw, bias: &db }, seed, h)?);
    Ok(out)
}

/// Both classification losses and cosine similarity (each argument).
pub fn check_losses(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut r = stream(seed, 2);
    let logits = uniform_tensor(&mut r, &[512], -3.0, 3.0);
    let coords: Vec<usize> = (0..512).collect();
    let mut out = Vec::new();
    for kind in [LossKind::Ce, LossKind::Logit] {
        let (_, g) = classification_loss(logits.data(), 6, kind)?;
        let f = |v: &[f64]| classification_loss(v, 6, kind).unwrap().0;
        let stats = fd_check(&f, &|_| vec![], logits.data(), &g, &coords, h);
        out.push(CheckResult { name: format!("{kind} loss"), stats, tolerance: 1e-6 });
    }
    let a = uniform_tensor(&mut r, &[512], -1.0, 1.0);
    let b = uniform_tensor(&mut r, &[512], -1.0, 1.0);
    let cs = cosine_similarity(a.data(), b.data())?;
    let coords: Vec<usize> = (0..512).collect();
    let fa = |v: &[f64]| cosine_similarity(v, b.data()).unwrap().score;
    let fb = |v: &[f64]| cosine_similarity(a.data(), v).unwrap().score;
    let stats = fd_check(&fa, &|_| vec![], a.data(), &cs.grad_a, &coords, h);
    out.push(CheckResult { name: "cosine similarity (first)".into(), stats, tolerance: 1e-6 });
    let stats = fd_check(&fb, &|_| vec![], b.data(), &cs.grad_b, &coords, h);
    out.push(CheckResult { name: "cosine similarity (second)".into(), stats, tolerance: 1e-6 });
    Ok(out)
}

/// Target class and feature weight of the composite objective used by
/// [`check_architecture`].
pub const COMPOSITE_TARGET: usize = 3;
pub const COMPOSITE_LAMBDA: f64 = 0.4;

fn composite_grad<M: Real>(model: &Model<M>, x: &Tensor<M>, tap: usize, reference: &[f64], kind: LossKind) -> Result<Vec<f64>> {
    let (logits, feat) = model.forward_with_taps(x, tap)?;
    let (_, up) = classification_loss(&logits, COMPOSITE_TARGET, kind)?;
    let reference: Vec<M> = reference.iter().map(|&v| M::lit(v)).collect();
    let cs = cosine_similarity(feat.data(), &reference)?;
    let scale = M::lit(-COMPOSITE_LAMBDA);
    let inj = Tensor::new(feat.shape().to_vec(), cs.grad_a.iter().map(|&g| scale * g).collect())?;
    let g = model.input_gradient(x, Upstream { grad_logits: &up, feature: Some(TapGradient { tap, grad: &inj }) })?;
    Ok(g.data().iter().map(|v| v.as_f64()).collect())
}

/// End-to-end input gradients of `J(logits(x), t) − λ·CS(f_tap(x), r)` for
/// every tap and both losses, at a random input with random references `r`.
/// The `f32` model is checked in single precision and its `f64` cast in
/// double precision, against the same `f64` finite differences.
pub fn check_architecture(model: &Model<f32>, name: &str, seed: u64, n_coords: usize, h: f64) -> Result<Vec<CheckResult>> {
    let m64: Model<f64> = model.cast();
    let spec = m64.spec().clone();
    let mut r = stream(seed, 3);
    // Round the input through f32 so both precisions see the same point.
    let x32: Tensor<f32> = uniform_tensor(&mut r, &spec.input_shape, 0.0, 1.0).cast();
    let x64: Tensor<f64> = x32.cast();
    let layers: Vec<usize> = (1..=4).map(|t| spec.tap_layer(t)).collect::<Result<_>>()?;
    let trace = m64.forward_trace(&x64)?;
    let references: Vec<Vec<f64>> =
        layers.iter().map(|&l| (0..trace.output(l).len()).map(|_| r.uniform()).collect()).collect();
    let kinds = [LossKind::Ce, LossKind::Logit];

    let eval = |v: &[f64]| {
        let trace = m64.forward_trace(&Tensor::new(spec.input_shape.to_vec(), v.to_vec()).unwrap()).unwrap();
        let mut values = Vec::with_capacity(8);
        for (l, reference) in layers.iter().zip(&references) {
            let cs = cosine_similarity(trace.output(*l).data(), reference).unwrap().score;
            for kind in kinds {
                let j = classification_loss(trace.logits(), COMPOSITE_TARGET, kind).unwrap().0;
                values.push(j - COMPOSITE_LAMBDA * cs);
            }
        }
        Probe { values, pattern: trace.activation_pattern() }
    };
    let coords = sample_coords(seed, x64.len(), n_coords);
    let est = fd_estimates(&eval, x64.data(), &coords, h);

    let mut out = Vec::new();
    for (ti, reference) in references.iter().enumerate() {
        let tap = ti + 1;
        for (ki, kind) in kinds.into_iter().enumerate() {
            let o = ti * kinds.len() + ki;
            let g64 = composite_grad(&m64, &x64, tap, reference, kind)?;
            out.push(CheckResult { name: format!("{name} tap {tap} {kind} double"), stats: est.stats(o, &g64), tolerance: 1e-6 });
            let g32 = composite_grad(model, &x32, tap, reference, kind)?;
            out.push(CheckResult { name: format!("{name} tap {tap} {kind} single"), stats: est.stats(o, &g32), tolerance: 1e-3 });
        }
    }
    Ok(out)
}

/// Largest `|⟨Au, v⟩ − ⟨u, Aᵀv⟩|` seen for one linear operator over random
/// geometries and random `u`, `v`.
#[derive(Debug, Clone)]
pub struct AdjointGap {
    pub name: &'static str,
    pub pairs: usize,
    pub max_gap: f64,
}

/// Dot-product tests of the convolution input map, bilinear resizing and
/// the DI transform, `pairs` random pairs each.
pub fn adjoint_gaps(seed: u64, pairs: usize) -> Result<Vec<AdjointGap>> {
    let mut conv = AdjointGap { name: "conv input", pairs, max_gap: 0.0 };
    let mut resize = AdjointGap { name: "bilinear resize", pairs, max_gap: 0.0 };
    let mut di = AdjointGap { name: "diverse input", pairs, max_gap: 0.0 };
    for i in 0..pairs as u64 {
        let mut r = stream(seed, 100 + i);

        let (cin, cout) = (1 + r.below(3), 1 + r.below(4));
        let (h, w) = (3 + r.below(8), 3 + r.below(8));
        let (k, stride) = (1 + 2 * r.below(2), 1 + r.below(2));
        let pad = r.below(k / 2 + 1);
        let u = uniform_tensor(&mut r, &[cin, h, w], -1.0, 1.0);
        let wt = uniform_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let au = crate::nn::conv2d_forward(&u, &wt, &vec![0.0; cout], stride, pad)?;
        let v = uniform_tensor(&mut r, au.shape(), -1.0, 1.0);
        let atv = crate::nn::conv2d_backward_input(u.shape(), &wt, &v, stride, pad)?;
        conv.max_gap = conv.max_gap.max((au.dot(&v)? - u.dot(&atv)?).abs());

        let c = 1 + r.below(3);
        let (h, w, oh, ow) = (1 + r.below(16), 1 + r.below(16), 1 + r.below(16), 1 + r.below(16));
        let u = uniform_tensor(&mut r, &[c, h, w], -1.0, 1.0);
        let au = crate::transforms::bilinear_resize(&u, oh, ow)?;
        let v = uniform_tensor(&mut r, au.shape(), -1.0, 1.0);
        let atv = crate::transforms::bilinear_resize_adjoint(&v, h, w)?;
        resize.max_gap = resize.max_gap.max((au.dot(&v)? - u.dot(&atv)?).abs());

        let side = 4 + r.below(29);
        let params = crate::transforms::DiParams { p: 1.0, min_ratio: r.uniform_range(0.3, 1.0) };
        let trace = crate::transforms::DiTrace::draw(side, side, &params, &mut r)?;
        let u = uniform_tensor(&mut r, &[3, side, side], -1.0, 1.0);
        let au = crate::transforms::di_apply(&u, &trace)?;
        let v = uniform_tensor(&mut r, au.shape(), -1.0, 1.0);
        let atv = crate::transforms::di_adjoint(&v, &trace)?;
        di.max_gap = di.max_gap.max((au.dot(&v)? - u.dot(&atv)?).abs());
    }
    Ok(vec![conv, resize, di])
}
