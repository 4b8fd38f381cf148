mod common;

use advlab::attack::*;
use advlab::gradcheck::{fd_check, sample_coords};
use advlab::nn::softmax_cross_entropy;
use advlab::tensor::sign;
use advlab::train::{train, TrainHyper};
use advlab::transforms::{bilinear_resize, di_apply, loc_apply, CropScale, DiParams, TiKernel, TiParams};
use advlab::data::{Dataset, ImageRecord};
use advlab::zoo::{LayerSpec, Model, ModelSpec, Upstream};
use advlab::Tensor;
use common::{random_tensor, rng, tiny_model};

fn image(seed: u64) -> Tensor<f32> {
    random_tensor(&mut rng(seed), &[2, 8, 8], 0.0, 1.0)
}

fn reduced(base: &str) -> AttackConfig {
    AttackConfig {
        mu: 0.0,
        di: DiParams { p: 0.0, ..DiParams::default() },
        ti: Some(TiParams { radius: 0, sigma: 3.0 }),
        lambda: 0.0,
        enable_local: false,
        iterations: 40,
        ..AttackConfig::preset(base).unwrap()
    }
}

/// Targeted I-FGSM written out directly: `δ ← clip(δ − α·sign(∇ CE))`.
fn reference_ifgsm(model: &Model<f32>, x: &Tensor<f32>, target: usize, alpha: f32, eps: f32, iters: usize) -> Vec<Tensor<f32>> {
    let mut delta = Tensor::<f32>::zeros(x.shape());
    let mut out = Vec::new();
    for _ in 0..iters {
        let x_adv = x.add(&delta).unwrap();
        let (_, up) = softmax_cross_entropy(&model.logits(&x_adv).unwrap(), target).unwrap();
        let g = model.input_gradient(&x_adv, Upstream { grad_logits: &up, feature: None }).unwrap();
        let s = sign(&g);
        let next: Vec<f32> = delta
            .data()
            .iter()
            .zip(s.data())
            .zip(x.data())
            .map(|((&d, &sv), &xv)| (d - alpha * sv).clamp(-eps, eps).clamp(-xv, 1.0 - xv))
            .collect();
        delta = Tensor::new(x.shape().to_vec(), next).unwrap();
        out.push(delta.clone());
    }
    out
}

fn trajectory(members: &[Member<'_, f32>], x: &Tensor<f32>, target: usize, cfg: &AttackConfig, image: u64) -> Vec<Tensor<f32>> {
    let mut steps = Vec::new();
    let mut obs = |_: usize, d: &Tensor<f32>| steps.push(d.clone());
    ensemble_attack(members, x, target, cfg, image, &AttackOptions::default(), Some(&mut obs)).unwrap();
    steps
}

#[test]
fn reduced_configuration_is_ifgsm_bit_for_bit() {
    let model = tiny_model(1);
    for ti in [Some(TiParams { radius: 0, sigma: 3.0 }), None] {
        for (i, base) in ["dtmi-ce-li", "ifgsm", "dtmi-ce"].into_iter().cycle().take(10).enumerate() {
            let cfg = AttackConfig { ti, ..reduced(base) };
            let x = image(100 + i as u64);
            let target = i % 5;
            let want = reference_ifgsm(&model, &x, target, cfg.alpha as f32, cfg.epsilon as f32, cfg.iterations);
            let got = trajectory(&[Member { model: &model, tap: 3 }], &x, target, &cfg, i as u64);
            assert_eq!(got, want, "image {i} ({base})");
        }
    }
}

#[test]
fn constraints_hold_after_every_iteration() {
    let model = tiny_model(2);
    for run in 0..50u64 {
        let preset = PRESETS[run as usize % PRESETS.len()];
        let cfg = AttackConfig { seed: run, iterations: 60, ..AttackConfig::preset(preset).unwrap() };
        let x = image(200 + run);
        let eps = cfg.epsilon as f32;
        let mut seen = 0;
        let mut obs = |_: usize, d: &Tensor<f32>| {
            seen += 1;
            assert!(d.max_abs() <= eps, "run {run}: ‖δ‖∞ = {}", d.max_abs());
            let xa = x.add(d).unwrap();
            assert!(xa.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "run {run} left the pixel box");
        };
        let members = [Member { model: &model, tap: cfg.tap }];
        ensemble_attack(&members, &x, (run % 5) as usize, &cfg, run, &AttackOptions::default(), Some(&mut obs)).unwrap();
        assert_eq!(seen, cfg.iterations);
    }
}

#[test]
fn single_member_and_duplicated_member_match_attack() {
    let model = tiny_model(3);
    let x = image(3);
    let cfg = AttackConfig { iterations: 30, seed: 4, ..AttackConfig::preset("dtmi-logit-li").unwrap() };
    let one = Member { model: &model, tap: 3 };
    let opts = AttackOptions { checkpoints: vec![10, 30], telemetry: true };
    let single = attack(&model, &x, 2, &cfg, 9, &opts).unwrap();
    let listed = ensemble_attack(&[one], &x, 2, &cfg, 9, &opts, None).unwrap();
    assert_eq!(single, listed);
    assert_eq!(trajectory(&[one], &x, 2, &cfg, 9), trajectory(&[one, one], &x, 2, &cfg, 9));
}

#[test]
fn two_model_first_step_uses_the_mean_gradient() {
    let (a, b) = (tiny_model(4), tiny_model(5));
    let x = image(4);
    let cfg = AttackConfig { iterations: 1, seed: 6, ..AttackConfig::preset("dtmi-ce-li").unwrap() };
    let draws = BranchDraws::draw(&cfg, x.shape(), 7, 0).unwrap();
    let ga = li_gradient_frozen(&a, &x, &Tensor::zeros(x.shape()), 1, &cfg, 3, &draws).unwrap().grad;
    let gb = li_gradient_frozen(&b, &x, &Tensor::zeros(x.shape()), 1, &cfg, 2, &draws).unwrap().grad;
    let mean: Vec<f32> = ga.data().iter().zip(gb.data()).map(|(p, q)| (p + q) * 0.5).collect();
    let mut state = MomentumState::zeros(x.shape());
    mi_update(&mut state, &Tensor::new(x.shape().to_vec(), mean).unwrap(), cfg.mu, &TiKernel::from_params(cfg.ti).unwrap()).unwrap();
    let want = step_and_clip(&Tensor::zeros(x.shape()), &state.g, cfg.alpha as f32, cfg.epsilon as f32, &x).unwrap();
    let members = [Member { model: &a, tap: 3 }, Member { model: &b, tap: 2 }];
    let got = ensemble_attack(&members, &x, 1, &cfg, 7, &AttackOptions::default(), None).unwrap();
    assert_eq!(got.delta, want);
    assert!(ensemble_attack::<f32>(&[], &x, 1, &cfg, 7, &AttackOptions::default(), None).is_err());
}

#[test]
fn li_gradient_special_cases() {
    let model = tiny_model(6);
    let x = image(6);
    let delta: Tensor<f32> = random_tensor(&mut rng(60), x.shape(), -0.05, 0.05);
    let target = 4;

    // Local branch off, λ = 0: the plain gradient through the DI draw.
    let cfg = AttackConfig { lambda: 0.0, enable_local: false, seed: 3, ..AttackConfig::default() };
    let draws = BranchDraws::draw(&cfg, x.shape(), 1, 5).unwrap();
    let got = li_gradient(&model, &x, &delta, target, &cfg, 1, 5).unwrap();
    let input = di_apply(&x.add(&delta).unwrap(), &draws.global_di).unwrap();
    let (_, up) = softmax_cross_entropy(&model.logits(&input).unwrap(), target).unwrap();
    let g = model.input_gradient(&input, Upstream { grad_logits: &up, feature: None }).unwrap();
    assert_eq!(got.grad, advlab::transforms::di_adjoint(&g, &draws.global_di).unwrap());
    assert!(got.cs.is_none() && got.loss_local.is_none());

    // Full-image crop, λ = 0, no DI: both branches are the same input.
    let cfg = AttackConfig {
        lambda: 0.0,
        enable_local: true,
        scale: CropScale::new(1.0, 0.0).unwrap(),
        di: DiParams { p: 0.0, ..DiParams::default() },
        ..AttackConfig::default()
    };
    let got = li_gradient(&model, &x, &delta, target, &cfg, 2, 0).unwrap();
    let (_, up) = softmax_cross_entropy(&model.logits(&x.add(&delta).unwrap()).unwrap(), target).unwrap();
    let single = model.input_gradient(&x.add(&delta).unwrap(), Upstream { grad_logits: &up, feature: None }).unwrap();
    assert_eq!(got.grad, single.scale(2.0));
    assert_eq!(got.cs.map(|c| (c - 1.0).abs() < 1e-6), Some(true));
}

#[test]
fn li_gradient_matches_finite_differences_with_frozen_draws() {
    let m32 = tiny_model(7);
    let m64: Model<f64> = m32.cast();
    for (i, kind) in [LossKind::Ce, LossKind::Logit, LossKind::Ce].into_iter().enumerate() {
        let x32 = image(70 + i as u64);
        let d32: Tensor<f32> = random_tensor(&mut rng(71 + i as u64), x32.shape(), -0.06, 0.06);
        let cfg = AttackConfig { loss: kind, enable_local: true, lambda: 0.4 + i as f64, seed: i as u64, ..AttackConfig::default() };
        let draws = BranchDraws::draw(&cfg, x32.shape(), 3, 11).unwrap();
        let analytic = li_gradient_frozen(&m32, &x32, &d32, 2, &cfg, 3, &draws).unwrap();
        assert!(!analytic.degenerate);
        let analytic: Vec<f64> = analytic.grad.data().iter().map(|&v| v as f64).collect();

        let x64: Tensor<f64> = x32.cast();
        let shape = x64.shape().to_vec();
        let d = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).unwrap();
        let f = |v: &[f64]| li_objective(&m64, &x64, &d(v), 2, &cfg, 3, &draws).unwrap();
        let pattern = |v: &[f64]| {
            let global = di_apply(&x64.add(&d(v)).unwrap(), &draws.global_di).unwrap();
            let local = loc_apply(&x64, &draws.loc.unwrap()).unwrap().add(&d(v)).unwrap();
            let local = di_apply(&local, &draws.local_di).unwrap();
            let mut p = m64.forward_trace(&global).unwrap().activation_pattern();
            p.extend(m64.forward_trace(&local).unwrap().activation_pattern());
            p
        };
        let d64: Tensor<f64> = d32.cast();
        let coords = sample_coords(i as u64, d64.len(), 128);
        let s = fd_check(&f, &pattern, d64.data(), &analytic, &coords, 1e-4);
        assert!(s.max_rel <= 1e-3, "{kind}: {s:?}");
        assert!(s.checked * 10 >= coords.len() * 9, "{kind}: {s:?}");
    }
}

#[test]
fn zero_budget_leaves_the_image_unchanged() {
    let model = tiny_model(8);
    let x = image(8);
    let clean = model.predict(&x).unwrap();
    for target in [clean, (clean + 1) % 5] {
        let cfg = AttackConfig { epsilon: 0.0, iterations: 5, ..AttackConfig::preset("dtmi-ce-li").unwrap() };
        let r = attack(&model, &x, target, &cfg, 0, &AttackOptions::default()).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.success, target == clean);
    }
}

#[test]
fn logit_first_step_ascends_the_target_logit() {
    let model = tiny_model(9);
    let x = image(9);
    let target = 3;
    let cfg = AttackConfig { iterations: 1, ..reduced("dtmi-logit") };
    let r = attack(&model, &x, target, &cfg, 0, &AttackOptions::default()).unwrap();
    let mut up = vec![0.0f32; 5];
    up[target] = 1.0;
    let g = model.input_gradient(&x, Upstream { grad_logits: &up, feature: None }).unwrap();
    let alpha = cfg.alpha as f32;
    for ((&d, &gv), &xv) in r.delta.data().iter().zip(g.data()).zip(x.data()) {
        let step = alpha * gv.signum() * (gv != 0.0) as u8 as f32;
        assert_eq!(d, step.clamp(-xv, 1.0 - xv));
    }
}

/// Far more parameters than the eight images it is trained on.
fn memorizer_spec() -> ModelSpec {
    let conv = |cin, cout| LayerSpec::Conv2d { in_channels: cin, out_channels: cout, kernel: 3, stride: 1, pad: 1 };
    ModelSpec::new(
        "memorizer",
        [3, 16, 16],
        5,
        vec![
            conv(3, 16),
            LayerSpec::Relu,
            conv(16, 16),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(16, 32),
            LayerSpec::Relu,
            LayerSpec::AvgPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 512, outputs: 5 },
        ],
        [1, 3, 6, 7],
    )
    .unwrap()
}

#[test]
fn memorizing_model_is_always_fooled() {
    // Smooth variations of one base image, so every class region is near every image.
    let mut r = rng(12);
    let base: Tensor<f32> = random_tensor(&mut r, &[3, 16, 16], 0.3, 0.7);
    let records = (0..8)
        .map(|i| {
            let coarse: Tensor<f32> = random_tensor(&mut r, &[3, 4, 4], -0.15, 0.15);
            let v = bilinear_resize(&coarse, 16, 16).unwrap();
            ImageRecord { pixels: base.add(&v).unwrap(), label: i % 5 }
        })
        .collect();
    let data = Dataset::new(records, 5, "noise").unwrap();
    let hyper = TrainHyper { epochs: 100, batch_size: 8, learning_rate: 0.02, decay: vec![], seed: 1, ..TrainHyper::default() };
    let model = train(memorizer_spec(), &data, &hyper, &mut |_, _| {}).unwrap();
    let images = data.images();
    assert!(images.iter().zip(data.labels()).all(|(x, y)| model.predict(x).unwrap() == y), "did not memorize");
    for name in PRESETS {
        let cfg = AttackConfig::preset(name).unwrap();
        for (i, (x, y)) in images.iter().zip(data.labels()).enumerate() {
            let target = (y + 1 + i % 4) % 5;
            let r = attack(&model, x, target, &cfg, i as u64, &AttackOptions::default()).unwrap();
            assert!(r.success, "{name} image {i}: label {y}, target {target}");
        }
    }
}
