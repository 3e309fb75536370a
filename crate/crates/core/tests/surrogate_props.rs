use advicl::model::embed_restricted;
use advicl::{
    estimate_robust_error, gamma_psi, general_surrogate_mc, simplified_loss, AttackConfig,
    CovarianceSpec, RegimeConstants, RngStream,
};
use proptest::prelude::*;

mod common;

#[test]
fn monte_carlo_terms_match_simplified_loss() {
    let mut r = common::rng(41);
    for k in 0..6 {
        let d = 1 + k % 3;
        let cov = common::random_cov(&mut r, d);
        let rc = RegimeConstants::new(6, 3, 0.9, &cov).unwrap();
        let p = common::random_restricted(&mut r, d);
        let t = general_surrogate_mc(
            &embed_restricted(&p),
            &rc,
            20_000,
            &RngStream::new(41, k as u64),
        )
        .unwrap();
        let exact = simplified_loss(&p, &rc);
        assert_eq!((t.l2, t.l4), (0.0, 0.0));
        assert!(
            (t.l1 + t.l3 - exact).abs() < 3.0 * t.stderr,
            "case {k}: {} vs {exact} (se {})",
            t.l1 + t.l3,
            t.stderr
        );
    }
}

#[test]
fn surrogate_upper_bounds_adversarial_loss() {
    let mut r = common::rng(42);
    for k in 0..8 {
        let d = 1 + k % 3;
        let cov = common::random_cov(&mut r, d);
        let (n, m, eps) = (6, 2, 0.8);
        let rc = RegimeConstants::new(n, m, eps, &cov).unwrap();
        let params = if k % 2 == 0 {
            embed_restricted(&common::random_restricted(&mut r, d))
        } else {
            common::random_general(&mut r, d, 1.0)
        };
        let sur = general_surrogate_mc(&params, &rc, 4_000, &RngStream::new(42, k as u64)).unwrap();
        let cfg = AttackConfig::new(eps, m, RngStream::new(43, k as u64));
        let adv = estimate_robust_error(&params, &cov, n, &cfg, 4_000).unwrap();
        let se = (sur.stderr * sur.stderr + adv.stderr * adv.stderr).sqrt();
        assert!(
            adv.mean <= sur.total() + 3.0 * se,
            "case {k}: {} > {}",
            adv.mean,
            sur.total()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psi_increases_and_gamma_decreases_with_suffix(seed in any::<u64>(), d in 1usize..5, n in 1usize..40, m in 0usize..30) {
        let mut r = common::rng(seed);
        let cov = common::random_cov(&mut r, d);
        let (g0, p0) = gamma_psi(n, m, &cov).unwrap();
        let (g1, p1) = gamma_psi(n, m + 1, &cov).unwrap();
        prop_assert!(p1 > p0);
        let diff = g1 - g0;
        let eig = diff.symmetric_eigen();
        prop_assert!(eig.eigenvalues.max() <= 1e-12);
    }
}

#[test]
fn no_suffix_regime_has_zero_psi() {
    let cov = CovarianceSpec::diagonal(&[1.0, 2.0]).unwrap();
    let rc = RegimeConstants::new(10, 0, 3.0, &cov).unwrap();
    assert_eq!(rc.psi, 0.0);
}
