mod common;

use clipure_core::attack::{pgd, project, AttackConfig, Mode, Norm, Objective, Pipeline};
use clipure_core::diffprior::{noise, NoiseSchedule};
use clipure_core::dualenc::clip_loss;
use clipure_core::harness::ExperimentConfig;
use clipure_core::purifier::{to_polar, Purifier, PurifyConfig, Variant};
use clipure_core::riskbench::{kl_histogram_raw, Histogram};
use clipure_core::tensor::{cosine, Tape};
use clipure_core::zeroshot::{classify, evaluate, Preprocess};
use clipure_core::Tensor;
use proptest::prelude::*;

use common::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d).prop_filter("non-degenerate", |v| {
        v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cosine_is_scale_invariant(a in vec_strategy(8), b in vec_strategy(8), s in 1e-3f64..1e3, t in 1e-3f64..1e3) {
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * t).collect();
        let c0 = cosine(&a, &b).unwrap();
        let c1 = cosine(&sa, &tb).unwrap();
        prop_assert!((c0 - c1).abs() < 1e-12, "{c0} vs {c1}");
    }

    #[test]
    fn contrastive_loss_ignores_per_vector_scale(seed in 0u64..10_000, scales in prop::collection::vec(0.01f64..100.0, 8)) {
        let zi = gaussian_matrix(seed, 4, 5);
        let zt = gaussian_matrix(seed + 1, 4, 5);
        let rescale = |z: &Tensor<f64>, s: &[f64]| {
            let d: Vec<f64> = z.data().iter().enumerate().map(|(k, v)| v * s[k / 5]).collect();
            Tensor::new(vec![4, 5], d).unwrap()
        };
        let si = rescale(&zi, &scales[..4]);
        let st = rescale(&zt, &scales[4..]);
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let t = Tape::new();
            clip_loss(t.constant(a.clone()), t.constant(b.clone()), 0.07).unwrap().item()
        };
        let (l0, l1) = (loss(&zi, &zt), loss(&si, &st));
        prop_assert!(l0 >= 0.0);
        prop_assert!((l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0), "{l0} vs {l1}");
    }

    #[test]
    fn contrastive_loss_closed_form_on_orthonormal_pairs(k in 1usize..8, tau in 0.05f64..2.0) {
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        let e = Tensor::new(vec![k, k], eye).unwrap();
        let t = Tape::new();
        let l = clip_loss(t.constant(e.clone()), t.constant(e), tau).unwrap().item();
        let a = (1.0 / tau).exp();
        let expect = -(a / (a + k as f64 - 1.0)).ln();
        prop_assert!((l - expect).abs() < 1e-6, "{l} vs {expect}");
    }

    #[test]
    fn classification_ignores_embedding_scale(seed in 0u64..1000, z in vec_strategy(8), s in 1e-3f64..1e3) {
        let (_, bank) = toy_model(seed);
        let sz: Vec<f64> = z.iter().map(|v| v * s).collect();
        let (p0, s0) = classify(&z, &bank).unwrap();
        let (p1, s1) = classify(&sz, &bank).unwrap();
        prop_assert_eq!(p0, p1);
        for (a, b) in s0.iter().zip(&s1) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_permutation_maps_scores_and_label(seed in 0u64..1000, z in vec_strategy(8), perm in Just((0..CLASSES).collect::<Vec<usize>>()).prop_shuffle()) {
        let (_, bank) = toy_model(seed);
        let (p0, s0) = classify(&z, &bank).unwrap();
        let (p1, s1) = classify(&z, &bank.permuted(&perm)).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert_eq!(s1[i], s0[j]);
        }
        prop_assert_eq!(perm[p1], p0);
    }

    #[test]
    fn purify_step_keeps_unit_direction(seed in 0u64..1000, z in vec_strategy(8), eta in 0.0f64..100.0) {
        let (_, bank) = toy_model(seed);
        let cfg = PurifyConfig { eta, ..PurifyConfig::default() };
        let p = Purifier::new(&cfg, &bank, None).unwrap();
        let mut polar = to_polar(&z).unwrap();
        for step in 0..cfg.steps {
            polar = p.purify_step(&polar, step, 0).unwrap();
            prop_assert!((norm(&polar.u) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn purify_preserves_norm_and_scales(seed in 0u64..1000, z in vec_strategy(8), s in 1e-2f64..1e2, eta in 0.01f64..100.0) {
        let (_, bank) = toy_model(seed);
        let cfg = PurifyConfig { eta, ..PurifyConfig::default() };
        let p = Purifier::new(&cfg, &bank, None).unwrap();
        let out = p.purify(&Tensor::row(&z).unwrap(), &[0]).unwrap();
        prop_assert!((norm(out.data()) - norm(&z)).abs() <= 1e-5 * norm(&z));
        let sz: Vec<f64> = z.iter().map(|v| v * s).collect();
        let out_s = p.purify(&Tensor::row(&sz).unwrap(), &[0]).unwrap();
        let expect: Vec<f64> = out.data().iter().map(|v| v * s).collect();
        prop_assert!(rel(out_s.data(), &expect) < 1e-5);
    }

    #[test]
    fn purify_step_is_stationary_at_blank_direction(seed in 0u64..1000, r in 0.1f64..10.0, eta in 0.0f64..100.0) {
        let (_, bank) = toy_model(seed);
        let cfg = PurifyConfig { eta, ..PurifyConfig::default() };
        let p = Purifier::new(&cfg, &bank, None).unwrap();
        let mut polar = to_polar(bank.blank.data()).unwrap();
        polar.r = r;
        let next = p.purify_step(&polar, 0, 0).unwrap();
        for (a, b) in next.u.iter().zip(&polar.u) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let b = bank.blank.data();
        prop_assert!(cosine(&next.u, b).unwrap() >= cosine(&polar.u, b).unwrap() - 1e-9);
    }

    // A tangent perturbation δ maps to (1 − η)δ per step, so the whole
    // trajectory stays put only while |1 − η| < 1.
    #[test]
    fn purify_fixed_point_at_blank_direction(seed in 0u64..1000, r in 0.1f64..10.0, eta in 0.0f64..1.9) {
        let (_, bank) = toy_model(seed);
        let cfg = PurifyConfig { eta, ..PurifyConfig::default() };
        let p = Purifier::new(&cfg, &bank, None).unwrap();
        let b = bank.blank.data();
        let u: Vec<f64> = b.iter().map(|v| v / norm(b)).collect();
        let z: Vec<f64> = u.iter().map(|v| v * r).collect();
        let out = p.purify(&Tensor::row(&z).unwrap(), &[0]).unwrap();
        let u_out: Vec<f64> = out.data().iter().map(|v| v / r).collect();
        for (a, b) in u_out.iter().zip(&u) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_step_purifier_is_identity_in_evaluation(seed in 0u64..1000) {
        let (enc, bank) = toy_model(seed);
        let cfg = PurifyConfig { steps: 0, ..PurifyConfig::default() };
        let p = Purifier::new(&cfg, &bank, None).unwrap();
        let x = toy_images(seed + 1, 16);
        let labels: Vec<usize> = (0..16).map(|i| i % CLASSES).collect();
        let plain = evaluate(&enc, &bank, &x, &labels, None).unwrap();
        let zero = evaluate(&enc, &bank, &x, &labels, Some(&p as &dyn Preprocess<f64>)).unwrap();
        prop_assert_eq!(plain, zero);
    }

    #[test]
    fn projection_respects_ball_and_box(
        x0 in prop::collection::vec(0.0f64..=1.0, 12),
        x in prop::collection::vec(-1.0f64..2.0, 12),
        eps in 0.0f64..0.5,
        l2 in any::<bool>(),
    ) {
        let norm_kind = if l2 { Norm::L2 } else { Norm::Linf };
        let a = Tensor::new(vec![2, 6], x0).unwrap();
        let b = Tensor::new(vec![2, 6], x).unwrap();
        let out = project(&a, &b, norm_kind, eps);
        prop_assert!(clipure_core::attack::max_distance(&a, &out, norm_kind) <= eps + 1e-9);
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // f32 storage must satisfy the same bound
        let out32 = project(&a.cast::<f32>(), &b.cast::<f32>(), norm_kind, eps);
        prop_assert!(clipure_core::attack::max_distance(&a.cast::<f32>(), &out32, norm_kind) <= eps + 1e-9);
    }

    #[test]
    fn noising_is_linear_with_exact_coefficients(
        z in prop::collection::vec(-5.0f64..5.0, 6),
        e in prop::collection::vec(-5.0f64..5.0, 6),
        t in 0usize..=100,
    ) {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let ab = sched.alpha_bar(t).unwrap();
        let out = noise(&z, t, &e, &sched).unwrap();
        for ((o, zi), ei) in out.iter().zip(&z).zip(&e) {
            prop_assert!((o - (ab.sqrt() * zi + (1.0 - ab).sqrt() * ei)).abs() < 1e-7);
        }
        let zero = vec![0.0; 6];
        let from_z = noise(&z, t, &zero, &sched).unwrap();
        let from_e = noise(&zero, t, &e, &sched).unwrap();
        for ((o, a), b) in out.iter().zip(&from_z).zip(&from_e) {
            prop_assert!((o - (a + b)).abs() < 1e-7);
        }
    }

    #[test]
    fn histogram_kl_is_non_negative(
        a in prop::collection::vec(-10.0f64..10.0, 64..300),
        b in prop::collection::vec(-10.0f64..10.0, 64..300),
        bins in 2usize..100,
    ) {
        let kl = kl_histogram_raw(&a, &b, bins).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_histogram_raw(&a, &a, bins).unwrap().abs() < 1e-12);
    }

    #[test]
    fn config_text_roundtrips(
        seed in any::<u32>(),
        eps_num in 0u32..32,
        steps in 1usize..200,
        eta in 0.01f64..1000.0,
        tau in 0.01f64..1.0,
        literal in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("run.seed", &seed.to_string()).unwrap();
        cfg.set("attack.eps", &format!("{eps_num}/255")).unwrap();
        cfg.set("attack.steps", &steps.to_string()).unwrap();
        cfg.set("purify.eta", &eta.to_string()).unwrap();
        cfg.set("encoder.tau", &tau.to_string()).unwrap();
        cfg.set("purify.literal_polar", &literal.to_string()).unwrap();
        prop_assert_eq!(cfg.attack.eps, eps_num as f64 / 255.0);
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
    #[test]
    fn stored_floats_reload_bit_for_bit(edges in prop::collection::vec(-1e4f64..1e4, 1..50)) {
        let h = Histogram { adv: vec![1; edges.len()], ben: vec![2; edges.len()], edges };
        let back: Histogram = serde_json::from_str(&serde_json::to_string_pretty(&h).unwrap()).unwrap();
        prop_assert_eq!(back, h);
    }
}

#[test]
fn kl_vanishes_only_for_matching_histograms() {
    let a: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.3).collect();
    assert_eq!(kl_histogram_raw(&a, &a, 16).unwrap(), 0.0);
    assert!(kl_histogram_raw(&a, &shifted, 16).unwrap() > 0.01);
}

#[test]
fn diff_purifier_is_reproducible() {
    let (_, bank) = toy_model(8);
    let prior = toy_prior(&bank, 9);
    let cfg = PurifyConfig {
        variant: Variant::Diff,
        eta: 1.0,
        t_lo: 10,
        t_hi: 90,
        seed: 4,
        ..PurifyConfig::default()
    };
    let p = Purifier::new(&cfg, &bank, Some(&prior)).unwrap();
    let z = gaussian_matrix(10, 6, bank.dim());
    let ids: Vec<usize> = (0..6).collect();
    let a = p.purify(&z, &ids).unwrap();
    assert_eq!(a, p.purify(&z, &ids).unwrap());
    // the row's stream depends on its id, not on its batch position
    let single = p.purify(&z.select_rows(&[3]), &[3]).unwrap();
    assert_eq!(single.data(), a.row_slice(3));
}

#[test]
fn attack_is_bit_reproducible() {
    let (enc, bank) = toy_model(11);
    let cfg = PurifyConfig {
        steps: 3,
        eta: 5.0,
        ..PurifyConfig::default()
    };
    let p = Purifier::new(&cfg, &bank, None).unwrap();
    let pipe = Pipeline::new(&enc, &bank).with_purifier(p, Mode::Adaptive);
    let x = toy_images(12, 5);
    let labels = [0, 1, 2, 3, 0];
    let ids = [0, 1, 2, 3, 4];
    let acfg = AttackConfig {
        steps: 5,
        sigma: 0.01,
        ..AttackConfig::default()
    };
    let a = pgd(&pipe, &x, &labels, &ids, &acfg).unwrap();
    let b = pgd(&pipe, &x, &labels, &ids, &acfg).unwrap();
    assert_eq!(a.x_adv, b.x_adv);
    assert!(clipure_core::attack::max_distance(&x, &a.x_adv, Norm::Linf) <= acfg.eps + 1e-9);
    assert!(!pipe.stochastic());
}
