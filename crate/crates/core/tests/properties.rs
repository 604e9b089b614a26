use proptest::prelude::*;
use rand::SeedableRng;
use svrg_core::analysis::{self, RateParams};
use svrg_core::data::generate_synthetic;
use svrg_core::losses::prox;
use svrg_core::sampling::{self, BatchSchedule, S2Source, WeightedSampler};
use svrg_core::{LossKind, LossModel, Mode, Regularizer};

fn kind_strategy() -> impl Strategy<Value = LossKind> {
    prop_oneof![
        Just(LossKind::Logistic),
        Just(LossKind::Hsvm { epsilon: 0.1 }),
        Just(LossKind::Hsvm { epsilon: 0.5 }),
    ]
}

fn near_kink(kind: LossKind, tau: f64) -> bool {
    match kind {
        LossKind::Hsvm { epsilon } => (tau - (1.0 - epsilon)).abs() < 1e-3 || (tau - (1.0 + epsilon)).abs() < 1e-3,
        LossKind::Logistic => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn example_gradient_matches_finite_differences(
        kind in kind_strategy(),
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 4),
        i in 0usize..12,
        lambda in prop_oneof![Just(0.0), 0.01f64..1.0],
    ) {
        let ds = generate_synthetic(12, 4, 0.0, seed).unwrap();
        let model = LossModel::new(kind, lambda, Mode::Folded, &ds).unwrap();
        let tau = model.margin(&ds, i, &x);
        prop_assume!(!near_kink(kind, tau));
        let g = model.example_gradient(&ds, i, &x).unwrap().to_dense(&ds, &x);
        let h = 1e-5;
        for j in 0..4 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += h;
            down[j] -= h;
            // the full example objective includes the folded ridge term
            let f = |z: &[f64]| model.example_loss(&ds, i, z) + model.ridge_value(z);
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let scale = g[j].abs().max(1e-3);
            prop_assert!((fd - g[j]).abs() / scale < 1e-6, "coord {}: fd {} vs {}", j, fd, g[j]);
        }
    }

    #[test]
    fn derivative_is_lipschitz_with_curvature(kind in kind_strategy(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let bound = kind.curvature() * (a - b).abs();
        prop_assert!((kind.deriv(a) - kind.deriv(b)).abs() <= bound * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn folded_objective_splits_into_parts(seed in 0u64..500, lambda in 0.0f64..2.0, x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let ds = generate_synthetic(10, 3, 0.0, seed).unwrap();
        let folded = LossModel::new(LossKind::Logistic, lambda, Mode::Folded, &ds).unwrap();
        let composite = folded.with_mode(Mode::Composite, &ds);
        let split = composite.loss_average(&ds, &x) + 0.5 * lambda * x.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((folded.objective(&ds, &x) - split).abs() < 1e-12);
    }

    #[test]
    fn l1_prox_matches_grid_search(y in -3.0f64..3.0, t in 0.0f64..2.0, lambda in 0.0f64..1.5) {
        let got = prox(&Regularizer::L1 { lambda }, t, &[y])[0];
        // Objective is convex, so a coarse scan then a 1e-6 grid around the
        // coarse minimizer finds the global grid minimum.
        let phi = |u: f64| 0.5 * (u - y) * (u - y) + t * lambda * u.abs();
        let coarse = (-4000..=4000).map(|k| k as f64 * 1e-3).min_by(|a, b| phi(*a).total_cmp(&phi(*b))).unwrap();
        let fine = (-2000..=2000)
            .map(|k| coarse + k as f64 * 1e-6)
            .min_by(|a, b| phi(*a).total_cmp(&phi(*b)))
            .unwrap();
        prop_assert!((got - fine).abs() <= 1e-6 + 1e-12, "prox {} vs grid {}", got, fine);
    }

    #[test]
    fn ball_prox_lands_in_ball(y in prop::collection::vec(-5.0f64..5.0, 3), r in 0.1f64..3.0) {
        let reg = Regularizer::Ball2 { radius: r, center: vec![0.5, -0.5, 0.0] };
        let p = prox(&reg, 1.0, &y);
        prop_assert!(reg.value(&p).is_finite());
    }

    #[test]
    fn rho_monotonicity(
        eta in 0.001f64..0.2,
        m in 1.0f64..500.0,
        mu in 0.01f64..1.0,
        a in 0.1f64..2.0,
        b in 0.1f64..2.0,
        db in 0.0f64..1.0,
        dm in 1.0f64..100.0,
    ) {
        let p = RateParams { eta, m, mu, ..RateParams::default() };
        prop_assume!(1.0 - 2.0 * eta * a > 0.0);
        let base = analysis::rho_value(a, b, &p);
        prop_assert!(analysis::rho_value(a, b + db, &p) >= base);
        let longer = RateParams { m: m + dm, ..p };
        prop_assert!(analysis::rho_value(a, b, &longer) <= base);
        prop_assert!(analysis::rho_value(a + db.min(0.9 * (1.0 / (2.0 * eta) - a)), b, &p) >= base);
    }

    #[test]
    fn rho_decreases_then_premise_in_eta(eta in 0.001f64..0.24, m in 10.0f64..1000.0, mu in 0.05f64..0.5, l in 0.5f64..2.0) {
        // for η below the premise threshold, ρ(L) increases with η once the
        // 2Lη term dominates; check the premise boundary instead of shape
        let p = RateParams { eta, m, mu, l, l_bar: l, ..RateParams::default() };
        let rate = analysis::rho_l(&p);
        if 2.0 * eta * l >= 1.0 {
            prop_assert!(!rate.is_contracting());
        } else if let Some(v) = rate.value() {
            prop_assert!(v < 1.0 && v > 0.0);
        }
    }

    #[test]
    fn minibatch_of_one_is_rho_lbar(eta in 0.001f64..1.0, m in 1.0f64..1000.0, mu in 0.001f64..1.0, l_bar in 0.01f64..5.0) {
        let p = RateParams { eta, m, mu, l_bar, l: l_bar, ..RateParams::default() };
        let a = analysis::rho_minibatch_value(1.0, &p);
        let b = analysis::rho_value(l_bar, l_bar, &p);
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn mixed_with_full_batch_is_rho_l(eta in 0.001f64..1.0, m in 1.0f64..1000.0, mu in 0.001f64..1.0, l in 0.01f64..5.0) {
        let p = RateParams { eta, m, mu, l, l_bar: l, alpha: 1.0, ..RateParams::default() };
        prop_assert_eq!(analysis::rho_mixed(&p), analysis::rho_l(&p));
    }

    #[test]
    fn variance_schedule_is_monotone_and_hits_half_at_inflection(
        n in 2usize..2000,
        s2 in 0.01f64..10.0,
        gamma_scale in 0.001f64..1.0,
        rho_tilde in 0.5f64..0.97,
    ) {
        let gamma = gamma_scale * s2;
        let sizes: Vec<usize> = (0..400).map(|s| sampling::variance_batch_size(n, s2, gamma, rho_tilde, s)).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(sizes.iter().all(|&b| (1..=n).contains(&b)));
        let half = n.div_ceil(2);
        let first = sizes.iter().position(|&b| b >= half);
        let s_star = analysis::inflection_stage(s2, gamma, n, rho_tilde).max(0.0);
        // rounding up can reach ⌈n/2⌉ up to δ stages before s*
        let h = half as f64;
        let delta = if half > 1 {
            ((n as f64 - h + 1.0) / (h - 1.0)).ln() / (2.0 * (1.0 / rho_tilde).ln())
        } else {
            f64::INFINITY
        };
        if let Some(first) = first {
            let first = first as f64;
            prop_assert!(first <= s_star + 1.0 + 1e-9, "first {} vs s* {}", first, s_star);
            prop_assert!(first >= s_star - delta.max(1.0) - 1e-9, "first {} vs s* {} (δ {})", first, s_star, delta);
        } else {
            prop_assert!(s_star > 398.0);
        }
    }

    #[test]
    fn weighted_estimator_is_unbiased(
        weights in prop::collection::vec(0.01f64..10.0, 1..=8),
        seed in 0u64..1000,
    ) {
        let n = weights.len();
        let sampler = WeightedSampler::new(&weights).unwrap();
        let v: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64 * 0.37).sin()).collect();
        let expectation: f64 = (0..n).map(|i| sampler.probability(i) * v[i] / (n as f64 * sampler.probability(i))).sum();
        let mean = v.iter().sum::<f64>() / n as f64;
        prop_assert!((expectation - mean).abs() < 1e-12);
        let total: f64 = (0..n).map(|i| sampler.probability(i)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samplers_are_reproducible(k in 1usize..50, seed in 0u64..1000) {
        let weights: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let sampler = WeightedSampler::new(&weights).unwrap();
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<usize> = (0..k).map(|_| sampler.sample(&mut a)).collect();
        let ys: Vec<usize> = (0..k).map(|_| sampler.sample(&mut b)).collect();
        prop_assert_eq!(xs, ys);
        let wa = sampling::sample_without_replacement(50, k, &mut a).unwrap();
        let wb = sampling::sample_without_replacement(50, k, &mut b).unwrap();
        prop_assert_eq!(wa, wb);
    }

    #[test]
    fn s2_estimate_matches_deviation_form(seed in 0u64..500, lambda in 0.0f64..1.0, x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let ds = generate_synthetic(15, 3, 0.0, seed).unwrap();
        let model = LossModel::new(LossKind::Hsvm { epsilon: 0.3 }, lambda, Mode::Folded, &ds).unwrap();
        let s2 = analysis::estimate_s2(&model, &ds, &x);
        let mean = model.full_gradient_uncounted(&ds, &x);
        let dev: f64 = (0..15)
            .map(|i| {
                let g = model.example_gradient(&ds, i, &x).unwrap().to_dense(&ds, &x);
                g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            / 14.0;
        prop_assert!(s2 >= -1e-12);
        prop_assert!((s2 - dev).abs() < 1e-10);
    }
}

#[test]
fn doubling_schedule_is_monotone() {
    let schedule = BatchSchedule::Doubling { initial: 1 };
    let sizes: Vec<usize> = (0..8).map(|s| schedule.batch_size(s, 100)).collect();
    assert_eq!(sizes, vec![1, 2, 4, 8, 16, 32, 64, 100]);
    let v = BatchSchedule::VarianceBased {
        gamma: 0.01,
        rho_tilde: 0.9,
        s2: 1.0,
        source: S2Source::Initial,
    };
    assert_eq!(v.batch_size(0, 100), 50);
    assert_eq!(analysis::inflection_stage(1.0, 0.01, 100, 0.9), 0.0);
}

#[test]
fn hsvm_kinks_are_continuous() {
    for epsilon in [0.1, 0.5] {
        let kind = LossKind::Hsvm { epsilon };
        for kink in [1.0 - epsilon, 1.0 + epsilon] {
            let (l, r) = (kink - 1e-13, kink + 1e-13);
            assert!((kind.value(l) - kind.value(r)).abs() < 1e-12);
            assert!((kind.deriv(l) - kind.deriv(r)).abs() < 1e-12);
        }
        assert!((kind.value(1.0 - epsilon) - epsilon).abs() < 1e-15);
        assert!((kind.deriv(1.0 - epsilon) + 1.0).abs() < 1e-12);
    }
}
