use advicl::model::embed_restricted;
use advicl::{
    assemble_adversarial, attack_exact_affine, attack_pga, estimate_robust_error, predict,
    sample_task, AttackConfig, CovarianceSpec, LsaParams, Matrix, Perturbation, RngStream,
    TaskSample,
};
use proptest::prelude::*;
use rand::Rng;

mod common;

fn objective_at(params: &LsaParams, task: &TaskSample, delta: Matrix, eps: f64) -> f64 {
    let p = Perturbation::new(delta, eps).unwrap();
    let y = predict(params, &assemble_adversarial(task, &p).unwrap()).unwrap();
    0.5 * (y - task.y_q) * (y - task.y_q)
}

/// Brute-force maximum over a grid of step ε/200 for d = 1, M ≤ 2, built from
/// single-column predictions (the prediction is a sum over suffix columns).
fn grid_max(params: &LsaParams, task: &TaskSample, eps: f64) -> f64 {
    let m = task.m();
    let k = 200;
    let grid: Vec<f64> = (-k..=k).map(|i| eps * i as f64 / k as f64).collect();
    let pred = |delta: Matrix| {
        let p = Perturbation::new(delta, eps).unwrap();
        predict(params, &assemble_adversarial(task, &p).unwrap()).unwrap()
    };
    let base = pred(Matrix::zeros(1, m));
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            grid.iter()
                .map(|&g| {
                    let mut dl = Matrix::zeros(1, m);
                    dl[(0, j)] = g;
                    pred(dl) - base
                })
                .collect()
        })
        .collect();
    let val = |y: f64| 0.5 * (y - task.y_q) * (y - task.y_q);
    match m {
        1 => cols[0].iter().map(|c| val(base + c)).fold(0.0, f64::max),
        2 => {
            let mut best = 0.0f64;
            for a in &cols[0] {
                for b in &cols[1] {
                    best = best.max(val(base + a + b));
                }
            }
            best
        }
        _ => unreachable!(),
    }
}

#[test]
fn pga_matches_grid_on_tiny_general_instances() {
    let mut r = common::rng(31);
    let cov = CovarianceSpec::identity(1).unwrap();
    let trials = 100;
    let mut hits = 0;
    for t in 0..trials {
        let m = 1 + t % 2;
        let n = r.random_range(1..5);
        let eps = r.random_range(0.2..2.0);
        let params = common::random_general(&mut r, 1, 1.5);
        let task = sample_task(&RngStream::new(31, t as u64), &cov, n, m).unwrap();
        // A direct evaluation at a grid point cannot beat the separable grid maximum.
        if m == 2 {
            let a = objective_at(
                &params,
                &task,
                Matrix::from_row_slice(1, 2, &[0.3 * eps, -0.6 * eps]),
                eps,
            );
            let g = grid_max(&params, &task, eps);
            assert!(a <= g * (1.0 + 1e-9) + 1e-12);
        }
        let cfg = AttackConfig::new(eps, m, RngStream::new(32, t as u64));
        let pga = attack_pga(&params, &task, &cfg).unwrap().objective;
        let grid = grid_max(&params, &task, eps);
        if pga >= grid * (1.0 - 0.005) {
            hits += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}");
}

#[test]
fn exact_matches_grid_on_restricted_d1() {
    let mut r = common::rng(33);
    let cov = CovarianceSpec::identity(1).unwrap();
    for t in 0..30 {
        let m = 1 + t % 2;
        let eps = r.random_range(0.1..2.0);
        let params = embed_restricted(&common::random_restricted(&mut r, 1));
        let task = sample_task(&RngStream::new(33, t as u64), &cov, 3, m).unwrap();
        let ex = attack_exact_affine(&params, &task, eps).unwrap();
        let g = grid_max(&params, &task, eps);
        // The affine maximum sits on a grid corner, so the grid is exact.
        assert!(
            (ex.objective - g).abs() <= 1e-9 * (1.0 + g),
            "{} vs {g}",
            ex.objective
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_dominates_pga(seed in any::<u64>(), d in 1usize..5, n in 1usize..6, m in 1usize..5, eps in 0.0f64..2.5) {
        let mut r = common::rng(seed);
        let cov = common::random_cov(&mut r, d);
        let params = embed_restricted(&common::random_restricted(&mut r, d));
        let task = sample_task(&RngStream::new(seed, 0), &cov, n, m).unwrap();
        let ex = attack_exact_affine(&params, &task, eps).unwrap();
        let pga = attack_pga(&params, &task, &AttackConfig::new(eps, m, RngStream::new(seed, 1))).unwrap();
        prop_assert!(ex.objective >= pga.objective - 1e-9);
    }

    #[test]
    fn outcomes_are_feasible_and_consistent(seed in any::<u64>(), d in 1usize..4, m in 0usize..4, eps in 0.0f64..2.0) {
        let mut r = common::rng(seed);
        let cov = CovarianceSpec::identity(d).unwrap();
        let params = common::random_general(&mut r, d, 1.0);
        let task = sample_task(&RngStream::new(seed, 2), &cov, 3, m).unwrap();
        let out = attack_pga(&params, &task, &AttackConfig::new(eps, m, RngStream::new(seed, 3))).unwrap();
        prop_assert!(out.delta.max_column_norm() <= eps + 1e-12);
        let recomputed = objective_at(&params, &task, out.delta.delta().clone(), eps);
        prop_assert!((recomputed - out.objective).abs() <= 1e-10 * (1.0 + recomputed));
        prop_assert!((0.5 * (out.prediction - task.y_q).powi(2) - out.objective).abs() <= 1e-10 * (1.0 + recomputed));
    }

    #[test]
    fn zero_budget_reduces_to_clean_loss(seed in any::<u64>(), d in 1usize..4, m in 0usize..4) {
        let mut r = common::rng(seed);
        let cov = CovarianceSpec::identity(d).unwrap();
        let general = common::random_general(&mut r, d, 1.0);
        let restricted = embed_restricted(&common::random_restricted(&mut r, d));
        let task = sample_task(&RngStream::new(seed, 4), &cov, 2, m).unwrap();
        let clean = objective_at(&general, &task, Matrix::zeros(d, m), 0.0);
        let pga = attack_pga(&general, &task, &AttackConfig::new(0.0, m, RngStream::new(seed, 5))).unwrap();
        prop_assert_eq!(pga.objective, clean);
        let clean_r = objective_at(&restricted, &task, Matrix::zeros(d, m), 0.0);
        prop_assert_eq!(attack_exact_affine(&restricted, &task, 0.0).unwrap().objective, clean_r);
    }
}

#[test]
fn exact_objective_monotone_in_budget() {
    let mut r = common::rng(34);
    let cov = CovarianceSpec::diagonal(&[1.5, 0.7, 1.0]).unwrap();
    let params = embed_restricted(&common::random_restricted(&mut r, 3));
    for t in 0..100 {
        let task = sample_task(&RngStream::new(34, t), &cov, 6, 3).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20 {
            let v = attack_exact_affine(&params, &task, 0.1 * k as f64)
                .unwrap()
                .objective;
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }
}

#[test]
fn robust_error_of_zero_model_is_half_trace() {
    let cov = CovarianceSpec::diagonal(&[2.0, 0.5, 1.0]).unwrap();
    let cfg = AttackConfig::new(1.0, 4, RngStream::new(35, 0));
    let est = estimate_robust_error(&LsaParams::zeros(3), &cov, 8, &cfg, 40_000).unwrap();
    assert!((est.mean - 1.75).abs() < 3.0 * est.stderr, "{est:?}");
}

#[test]
fn robust_error_is_schedule_independent() {
    let cov = CovarianceSpec::identity(2).unwrap();
    let mut r = common::rng(36);
    let params = common::random_general(&mut r, 2, 1.0);
    let cfg = AttackConfig::new(0.5, 2, RngStream::new(36, 0));
    let a = estimate_robust_error(&params, &cov, 4, &cfg, 500).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let b = pool.install(|| estimate_robust_error(&params, &cov, 4, &cfg, 500).unwrap());
    assert_eq!(a, b);
    assert!(!a.exact);
}
