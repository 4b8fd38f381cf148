mod common;

use advlab::attack::{mi_update, step_and_clip, MomentumState};
use advlab::data::{assign_targets, parse_cifar10, parse_idx, Dataset, ImageRecord};
use advlab::eval::{feature_dominance, tasr, universality_counts};
use advlab::nn::{conv2d_forward, cosine_similarity, softmax_cross_entropy};
use advlab::tensor::l1_norm;
use advlab::transforms::{
    di_apply, di_transform, loc_crop, Branch, CropScale, DiParams, DiTrace, RngStream, StreamKey, TiKernel,
};
use advlab::Tensor;
use common::tiny_model;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn image32(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0.0f32..=1.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn idx_file(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for &d in dims {
        b.extend_from_slice(&(d as u32).to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_and_clip_respects_both_boxes(
        seed in any::<u64>(),
        eps in 0.0f64..0.2,
        alpha in 1e-4f64..0.1,
        steps in 1usize..6,
    ) {
        let mut r = RngStream::new(StreamKey::new(seed, 0, 0, Branch::Other(9)));
        let x = Tensor::<f32>::from_fn(&[2, 3, 3], |_| if r.bernoulli(0.2) { r.below(2) as f32 } else { r.uniform() as f32 });
        let mut delta = Tensor::<f32>::zeros(&[2, 3, 3]);
        for _ in 0..steps {
            let g = Tensor::<f32>::from_fn(&[2, 3, 3], |_| r.uniform_range(-1.0, 1.0) as f32);
            delta = step_and_clip(&delta, &g, alpha as f32, eps as f32, &x).unwrap();
            prop_assert!(delta.max_abs() <= eps as f32);
            let xa = x.add(&delta).unwrap();
            prop_assert!(xa.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn idx_round_trips_byte_exactly(
        (c, h, w, payload, labels) in (1usize..4, 1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(c, h, w, n)| {
            (Just(c), Just(h), Just(w), prop::collection::vec(any::<u8>(), n * c * h * w), prop::collection::vec(0u8..20, n))
        })
    ) {
        let n = labels.len();
        let dims = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
        let images = idx_file(&dims, &payload);
        let label_file = idx_file(&[n], &labels);
        let ds = parse_idx(&images, &label_file).unwrap();
        prop_assert!(ds.records().iter().all(|r| r.label < ds.num_classes()));
        prop_assert!(ds.records().iter().all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert_eq!(ds.to_idx().unwrap(), (images, label_file));
    }

    #[test]
    fn cifar_round_trips_byte_exactly(labels in prop::collection::vec(0u8..10, 1..4), seed in any::<u64>()) {
        let mut r = RngStream::new(StreamKey::new(seed, 0, 0, Branch::Other(8)));
        let mut bytes = Vec::new();
        for l in &labels {
            bytes.push(*l);
            bytes.extend((0..3072).map(|_| r.below(256) as u8));
        }
        let ds = parse_cifar10(&bytes).unwrap();
        prop_assert_eq!(ds.len(), labels.len());
        prop_assert_eq!(ds.to_cifar10().unwrap(), bytes);
    }

    #[test]
    fn targets_never_equal_labels(k in 2usize..12, labels in prop::collection::vec(0usize..12, 1..40), seed in any::<u64>()) {
        let records = labels
            .iter()
            .map(|&l| ImageRecord { pixels: Tensor::zeros(&[1, 1, 1]), label: l % k })
            .collect();
        let ds = Dataset::new(records, k, "prop").unwrap();
        let a = assign_targets(&ds, seed).unwrap();
        for (t, r) in a.targets.iter().zip(ds.records()) {
            prop_assert!(*t < k && *t != r.label);
            if k == 2 {
                prop_assert_eq!(*t, 1 - r.label);
            }
        }
        prop_assert_eq!(a, assign_targets(&ds, seed).unwrap());
    }

    #[test]
    fn ti_kernel_is_normalized_and_symmetric(radius in 0usize..8, sigma in 0.1f64..10.0) {
        let k = TiKernel::gaussian(radius, sigma).unwrap();
        let side = k.side();
        prop_assert_eq!(side, 2 * radius + 1);
        let w = k.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        for i in 0..side {
            for j in 0..side {
                let v = w[i * side + j];
                prop_assert_eq!(v, w[j * side + i]);
                prop_assert_eq!(v, w[(side - 1 - i) * side + j]);
                prop_assert_eq!(v, w[i * side + side - 1 - j]);
            }
        }
    }

    #[test]
    fn stochastic_transforms_keep_shape_and_replay(
        side in 2usize..40,
        c in 1usize..4,
        p in 0.0f64..=1.0,
        lower in 0.01f64..1.0,
        seed in any::<u64>(),
        iteration in 0u64..300,
    ) {
        let img = Tensor::<f32>::from_fn(&[c, side, side], |i| (i % 7) as f32 / 7.0);
        let key = StreamKey::new(seed, 3, iteration, Branch::GlobalDi);
        let params = DiParams { p, min_ratio: 0.7 };
        let (a, ta) = di_transform(&img, &params, &mut RngStream::new(key)).unwrap();
        let (b, tb) = di_transform(&img, &params, &mut RngStream::new(key)).unwrap();
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ta, tb);
        prop_assert_eq!(di_apply(&img, &ta).unwrap(), a);
        let scale = CropScale::new(lower, (1.0 - lower) * 0.5).unwrap();
        let key = key.with_branch(Branch::Loc);
        let (l1, t1) = loc_crop(&img, &scale, &mut RngStream::new(key)).unwrap();
        let (l2, t2) = loc_crop(&img, &scale, &mut RngStream::new(key)).unwrap();
        prop_assert_eq!(l1.shape(), img.shape());
        prop_assert_eq!((l1, t1), (l2, t2));
        prop_assert!(t1.top + t1.side <= side && t1.left + t1.side <= side);
    }

    #[test]
    fn conv_is_linear_in_input_and_weights(
        u in tensor(vec![2, 5, 5], -1.0, 1.0),
        v in tensor(vec![2, 5, 5], -1.0, 1.0),
        w1 in tensor(vec![3, 2, 3, 3], -1.0, 1.0),
        w2 in tensor(vec![3, 2, 3, 3], -1.0, 1.0),
        a in -2.0f64..2.0,
    ) {
        let zero = [0.0; 3];
        let conv = |x: &Tensor<f64>, w: &Tensor<f64>| conv2d_forward(x, w, &zero, 1, 1).unwrap();
        let lhs = conv(&u.scale(a).add(&v).unwrap(), &w1);
        let rhs = conv(&u, &w1).scale(a).add(&conv(&v, &w1)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        let lhs = conv(&u, &w1.scale(a).add(&w2).unwrap());
        let rhs = conv(&u, &w1).scale(a).add(&conv(&u, &w2)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn loss_primitives(logits in prop::collection::vec(-30.0f64..30.0, 2..12), b in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let target = logits.len() - 1;
        let (value, g) = softmax_cross_entropy(&logits, target).unwrap();
        prop_assert!(value.is_finite() && value >= 0.0);
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let a: Vec<f64> = b.iter().rev().cloned().collect();
        let cs = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&cs.score));
        let same = cosine_similarity(&b, &b).unwrap();
        if !same.degenerate {
            prop_assert!(same.grad_a.iter().chain(&same.grad_b).all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn mi_update_normalizes_each_term(raw in tensor(vec![2, 4, 4], -1.0, 1.0), prior in tensor(vec![2, 4, 4], -1.0, 1.0), mu in 0.0f64..2.0) {
        let mut s = MomentumState::zeros(raw.shape());
        mi_update(&mut s, &raw, 0.0, &TiKernel::identity()).unwrap();
        prop_assert!((l1_norm(&s.g) - 1.0).abs() < 1e-12);
        let mut s = MomentumState { g: prior.clone() };
        mi_update(&mut s, &raw, mu, &TiKernel::identity()).unwrap();
        let want = prior.scale(mu).add(&raw.scale(1.0 / l1_norm(&raw))).unwrap();
        prop_assert!(s.g.sub(&want).unwrap().max_abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tasr_of_a_concatenation_is_the_weighted_mean(
        images in prop::collection::vec(image32(vec![2, 8, 8]), 1..10),
        split in 0usize..10,
        seed in any::<u64>(),
    ) {
        let model = tiny_model(seed % 4);
        let targets: Vec<usize> = (0..images.len()).map(|i| (i + seed as usize) % 5).collect();
        let split = split.min(images.len());
        let all = tasr(&model, &images, &targets).unwrap();
        let a = tasr(&model, &images[..split], &targets[..split]).unwrap();
        let b = tasr(&model, &images[split..], &targets[split..]).unwrap();
        prop_assert!((0.0..=1.0).contains(&all.value));
        prop_assert_eq!(all.hits, a.hits + b.hits);
        let weighted = (a.value * a.total as f64 + b.value * b.total as f64) / all.total as f64;
        prop_assert!((all.value - weighted).abs() < 1e-12);
    }

    #[test]
    fn universality_ignores_image_order(
        images in prop::collection::vec(image32(vec![2, 8, 8]), 1..7),
        rotate in 0usize..7,
        seed in any::<u64>(),
    ) {
        let model = tiny_model(seed % 3);
        let n = images.len();
        let mut r = RngStream::new(StreamKey::new(seed, 0, 0, Branch::Other(7)));
        let deltas: Vec<Tensor<f32>> = (0..n)
            .map(|_| Tensor::from_fn(&[2, 8, 8], |_| r.uniform_range(-0.3, 0.3) as f32))
            .collect();
        let targets: Vec<usize> = (0..n).map(|_| r.below(5)).collect();
        let ids: Vec<usize> = (0..n).map(|i| 100 + i).collect();
        let base = universality_counts(&model, &deltas, &images, &targets, &ids).unwrap();
        prop_assert_eq!(base.len(), n);
        prop_assert!(base.iter().all(|u| u.count < n.max(1)));
        prop_assert!(base.windows(2).all(|w| w[0].count >= w[1].count));
        let order: Vec<usize> = (0..n).map(|i| (i + rotate) % n).collect();
        let pick = |v: &[Tensor<f32>]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let shuffled = universality_counts(
            &model,
            &pick(&deltas),
            &pick(&images),
            &order.iter().map(|&i| targets[i]).collect::<Vec<_>>(),
            &order.iter().map(|&i| ids[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert_eq!(base, shuffled);
    }

    #[test]
    fn dominance_is_symmetric_and_bounded(
        images in prop::collection::vec(image32(vec![2, 8, 8]), 2..7),
        delta in image32(vec![2, 8, 8]),
        tap in 1usize..=4,
    ) {
        let model = tiny_model(1);
        let delta = delta.map(|v| (v - 0.5) * 0.2);
        let fwd = feature_dominance(&model, &images, &delta, tap).unwrap();
        let rev: Vec<Tensor<f32>> = images.iter().rev().cloned().collect();
        let back = feature_dominance(&model, &rev, &delta, tap).unwrap();
        for m in [fwd.mean_cs_benign, fwd.mean_cs_adversarial] {
            prop_assert!((-1.0..=1.0).contains(&m));
        }
        prop_assert!((fwd.mean_cs_benign - back.mean_cs_benign).abs() < 1e-6);
        prop_assert!((fwd.mean_cs_adversarial - back.mean_cs_adversarial).abs() < 1e-6);
        let zero = feature_dominance(&model, &images, &Tensor::zeros(&[2, 8, 8]), tap).unwrap();
        prop_assert_eq!(zero.mean_cs_benign, zero.mean_cs_adversarial);
    }
}

#[test]
fn di_identity_trace_when_not_applied() {
    let img = Tensor::<f32>::from_fn(&[3, 6, 6], |i| i as f32 / 108.0);
    let params = DiParams { p: 0.0, min_ratio: 0.7 };
    let (out, trace) = di_transform(&img, &params, &mut RngStream::new(StreamKey::new(1, 2, 3, Branch::GlobalDi))).unwrap();
    assert_eq!(trace, DiTrace::identity());
    assert_eq!(out, img);
}
