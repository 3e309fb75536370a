use advicl::{
    check_pl_along_trajectory, closed_form_solution, estimate_robust_error, nu_mu_constants,
    sigma_threshold, simplified_loss, train_minimax_empirical, train_surrogate_full,
    train_surrogate_restricted, AttackConfig, CovarianceSpec, InitSpec, Integrator, Matrix,
    RegimeConstants, RngStream, TrainConfig, TrainMode, TrajectoryDiagnostics,
};

mod common;

fn half_threshold_init(rc: &RegimeConstants) -> InitSpec {
    InitSpec::with_default_theta(0.5 * sigma_threshold(rc), rc.dim())
}

fn iso(d: usize, n: usize, m: usize, eps: f64) -> RegimeConstants {
    RegimeConstants::new(n, m, eps, &CovarianceSpec::identity(d).unwrap()).unwrap()
}

fn aniso(d: usize, n: usize, m: usize, eps: f64) -> RegimeConstants {
    let vals: Vec<f64> = (0..d)
        .map(|i| 0.5 + 1.5 * i as f64 / (d.max(2) - 1) as f64)
        .collect();
    RegimeConstants::new(n, m, eps, &CovarianceSpec::diagonal(&vals).unwrap()).unwrap()
}

fn assert_lemmas(
    rc: &RegimeConstants,
    init: &InitSpec,
    cfg: &TrainConfig,
    diag: &TrajectoryDiagnostics,
) {
    let nm = nu_mu_constants(init, rc);
    assert!(nm.valid && diag.conditions_met);
    let mut prev: Option<(usize, f64, f64)> = None;
    for r in &diag.records {
        assert!(
            r.balance_gap <= 1e-6,
            "balance {} at step {}",
            r.balance_gap,
            r.step
        );
        assert!(
            r.w22 > 0.0 && r.w22 * r.w22 >= nm.nu - 1e-6,
            "w22 {} at step {}",
            r.w22,
            r.step
        );
        let gap = r.excess.unwrap();
        if let Some((s, loss, g0)) = prev {
            assert!(r.loss <= loss + 1e-12, "loss rose at step {}", r.step);
            let env = g0 * (-nm.mu * cfg.eta * (r.step - s) as f64).exp() * (1.0 + 1e-3);
            assert!(
                gap <= env,
                "rate envelope broken at step {}: {gap} > {env}",
                r.step
            );
        }
        prev = Some((r.step, r.loss, gap));
    }
    let pl = check_pl_along_trajectory(diag, nm.mu, diag.loss_min.unwrap());
    assert!(pl.holds, "{pl:?}");
}

#[test]
fn converges_to_closed_form_on_isotropic_regimes() {
    for (d, n, m, eps) in [(1, 8, 2, 1.0), (4, 32, 4, 2.0), (8, 64, 8, 8f64.sqrt())] {
        let rc = iso(d, n, m, eps);
        let init = half_threshold_init(&rc);
        let cfg = TrainConfig::for_regime(&rc, TrainMode::RestrictedAnalytic);
        let (r, diag) = train_surrogate_restricted(&init, &rc, &cfg).unwrap();
        let sol = closed_form_solution(&rc).unwrap();
        assert!(diag.converged);
        assert!(common::rel_err(&r.product(), &sol.product) <= 1e-4);
        assert_lemmas(&rc, &init, &cfg, &diag);
    }
}

#[test]
fn converges_on_anisotropic_regimes() {
    for (d, n, m, eps) in [(2, 8, 2, 1.0), (4, 32, 4, 2.0)] {
        let rc = aniso(d, n, m, eps);
        let init = half_threshold_init(&rc);
        let mut cfg = TrainConfig::for_regime(&rc, TrainMode::RestrictedAnalytic);
        let sol = closed_form_solution(&rc).unwrap();
        let (r, _) = train_surrogate_restricted(&init, &rc, &cfg).unwrap();
        assert!(common::rel_err(&r.product(), &sol.product) <= 1e-4);
        cfg.integrator = Integrator::Rk4;
        let (r, diag) = train_surrogate_restricted(&init, &rc, &cfg).unwrap();
        assert!(common::rel_err(&r.product(), &sol.product) <= 1e-4);
        assert_lemmas(&rc, &init, &cfg, &diag);
    }
}

#[test]
fn euler_balance_drift_is_first_order_in_step() {
    let rc = aniso(4, 32, 4, 2.0);
    let init = half_threshold_init(&rc);
    let mut cfg = TrainConfig::for_regime(&rc, TrainMode::RestrictedAnalytic);
    let drift = |cfg: &TrainConfig| {
        let (r, _) = train_surrogate_restricted(&init, &rc, cfg).unwrap();
        r.balance_gap()
    };
    let coarse = drift(&cfg);
    cfg.eta /= 10.0;
    cfg.max_steps *= 10;
    let fine = drift(&cfg);
    assert!(coarse > 0.0 && fine > 0.0);
    let ratio = coarse / fine;
    assert!((ratio - 10.0).abs() < 1.0, "drift ratio {ratio}");
}

#[test]
fn halving_step_leaves_terminal_product_unchanged() {
    for rc in [iso(4, 32, 4, 2.0), aniso(3, 16, 3, 1.5)] {
        let init = half_threshold_init(&rc);
        let mut cfg = TrainConfig::for_regime(&rc, TrainMode::RestrictedAnalytic);
        let (a, _) = train_surrogate_restricted(&init, &rc, &cfg).unwrap();
        cfg.eta /= 2.0;
        let (b, _) = train_surrogate_restricted(&init, &rc, &cfg).unwrap();
        assert!(common::rel_err(&a.product(), &b.product()) < 1e-6);
    }
}

#[test]
fn zero_scale_init_is_stuck() {
    // σ = 0 is excluded by InitSpec, so build the degenerate point directly.
    let rc = iso(2, 8, 2, 1.0);
    let r = advicl::RestrictedParams::new(0.0, Matrix::zeros(2, 2));
    let (gw, gm) = advicl::simplified_gradient(&r, &rc);
    assert_eq!((gw, gm.amax()), (0.0, 0.0));
    assert_eq!(simplified_loss(&r, &rc), 4.0);
    assert!(InitSpec::new(0.0, advicl::default_theta(2))
        .validate(&rc.cov)
        .is_err());
}

fn full_cfg(rc: &RegimeConstants, steps: usize, batch: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_regime(rc, TrainMode::FullMc);
    cfg.max_steps = steps;
    cfg.batch_tasks = batch;
    cfg.diag_every = 1;
    cfg.stream = RngStream::new(seed, 0);
    cfg
}

#[test]
fn off_blocks_stay_at_noise_floor() {
    let rc = aniso(3, 8, 2, 1.0);
    let init = half_threshold_init(&rc);
    let cfg = full_cfg(&rc, 100, 256, 51);
    let (_, diag) = train_surrogate_full(&init, &rc, &cfg).unwrap();
    assert_eq!(diag.records.len(), 101);
    for r in &diag.records {
        assert!(
            r.off_grad_norm.unwrap() < r.grad_noise_floor.unwrap(),
            "step {}",
            r.step
        );
        let off = (r.off_v21.unwrap().powi(2) + r.off_kq21.unwrap().powi(2)).sqrt();
        assert!(off <= r.param_noise_floor.unwrap(), "step {}", r.step);
    }
}

#[test]
fn full_training_approaches_closed_form() {
    let rc = iso(2, 8, 2, 1.0);
    let init = half_threshold_init(&rc);
    let mut cfg = full_cfg(&rc, 1000, 256, 52);
    cfg.diag_every = 100;
    let (p, _) = train_surrogate_full(&init, &rc, &cfg).unwrap();
    let sol = closed_form_solution(&rc).unwrap();
    let prod = p.kq11().into_owned() * p.v22();
    assert!(common::rel_err(&prod, &sol.product) < 0.05);
}

#[test]
fn full_training_is_reproducible() {
    let rc = iso(2, 6, 1, 0.5);
    let init = half_threshold_init(&rc);
    let cfg = full_cfg(&rc, 20, 64, 53);
    let a = train_surrogate_full(&init, &rc, &cfg).unwrap();
    let b = train_surrogate_full(&init, &rc, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

fn minimax_cfg(rc: &RegimeConstants, scale: f64, steps: usize, batch: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_regime(rc, TrainMode::MinimaxEmpirical);
    cfg.eta *= scale;
    cfg.max_steps = steps;
    cfg.batch_tasks = batch;
    cfg.diag_every = 100;
    cfg.stream = RngStream::new(61, 0);
    cfg
}

#[test]
fn minimax_without_attack_recovers_clean_solution() {
    let rc = iso(2, 8, 2, 0.0);
    let init = half_threshold_init(&rc);
    let cfg = minimax_cfg(&rc, 10.0, 2000, 1024);
    let (p, diag) = train_minimax_empirical(&init, &rc.cov, 8, 2, 0.0, &cfg).unwrap();
    let sol = closed_form_solution(&rc).unwrap();
    let prod = p.kq11().into_owned() * p.v22();
    assert!(common::rel_err(&prod, &sol.product) < 0.05);
    assert!(diag.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn minimax_loss_below_surrogate() {
    let rc = iso(1, 8, 2, 1.0);
    let init = half_threshold_init(&rc);
    let cfg = minimax_cfg(&rc, 10.0, 300, 64);
    let (p, diag) = train_minimax_empirical(&init, &rc.cov, 8, 2, 1.0, &cfg).unwrap();
    assert!(diag.records.iter().all(|r| r.loss.is_finite()));
    let attack = AttackConfig::new(1.0, 2, RngStream::new(62, 0));
    let adv = estimate_robust_error(&p, &rc.cov, 8, &attack, 4000).unwrap();
    let sol = closed_form_solution(&rc).unwrap();
    let sur = simplified_loss(&sol.restricted(), &rc);
    assert!(adv.mean <= sur + 3.0 * adv.stderr, "{} > {sur}", adv.mean);
}
