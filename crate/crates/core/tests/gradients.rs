use advicl::attack::attacked_loss_gradient;
use advicl::surrogate::general_surrogate_gradient_mc;
use advicl::theory::surrogate_excess;
use advicl::{
    closed_form_solution, general_surrogate_mc, project_perturbation, sample_task,
    simplified_gradient, simplified_loss, surrogate_min_value, CovarianceSpec, LsaParams, Matrix,
    RegimeConstants, RestrictedParams, RngStream,
};
use proptest::prelude::*;

mod common;

const H: f64 = 1e-6;

fn fd_restricted(r: &RestrictedParams, rc: &RegimeConstants) -> (f64, Matrix) {
    let f = |w22: f64, w11: &Matrix| simplified_loss(&RestrictedParams::new(w22, w11.clone()), rc);
    let gw = (f(r.w22 + H, &r.w11) - f(r.w22 - H, &r.w11)) / (2.0 * H);
    let d = r.dim();
    let gm = Matrix::from_fn(d, d, |i, j| {
        let mut p = r.w11.clone();
        let mut m = r.w11.clone();
        p[(i, j)] += H;
        m[(i, j)] -= H;
        (f(r.w22, &p) - f(r.w22, &m)) / (2.0 * H)
    });
    (gw, gm)
}

fn stacked(g: &(f64, Matrix)) -> Vec<f64> {
    std::iter::once(g.0).chain(g.1.iter().cloned()).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn random_regime(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> RegimeConstants {
    use rand::Rng;
    let cov = common::random_cov(r, d);
    let n = r.random_range(1..20);
    let m = r.random_range(0..8);
    let eps = r.random_range(0.0..2.0);
    RegimeConstants::new(n, m, eps, &cov).unwrap()
}

#[test]
fn simplified_gradient_matches_central_differences() {
    let mut r = common::rng(21);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let d = 1 + k % 4;
        let rc = random_regime(&mut r, d);
        let p = common::random_restricted(&mut r, d);
        let e = rel(
            &stacked(&simplified_gradient(&p, &rc)),
            &stacked(&fd_restricted(&p, &rc)),
        );
        worst = worst.max(e);
    }
    assert!(worst <= 1e-6, "max relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn simplified_gradient_fd_property(seed in any::<u64>(), d in 1usize..5) {
        let mut r = common::rng(seed);
        let rc = random_regime(&mut r, d);
        let p = common::random_restricted(&mut r, d);
        let e = rel(&stacked(&simplified_gradient(&p, &rc)), &stacked(&fd_restricted(&p, &rc)));
        prop_assert!(e <= 1e-6, "{}", e);
    }

    #[test]
    fn loss_never_below_minimum(seed in any::<u64>(), d in 1usize..5) {
        let mut r = common::rng(seed);
        let rc = random_regime(&mut r, d);
        let p = common::random_restricted(&mut r, d);
        let loss = simplified_loss(&p, &rc);
        let min = surrogate_min_value(&rc);
        prop_assert!(loss >= min - 1e-12 * (1.0 + min.abs()));
        let gap = surrogate_excess(&p, &rc);
        prop_assert!((loss - min - gap).abs() < 1e-10 * (1.0 + loss.abs()));
    }
}

#[test]
fn stationary_at_closed_form() {
    let mut r = common::rng(22);
    for d in 1..=4 {
        let rc = random_regime(&mut r, d);
        let sol = closed_form_solution(&rc).unwrap();
        let (gw, gm) = simplified_gradient(&sol.restricted(), &rc);
        assert!(
            gw.abs() < 1e-10 && gm.amax() < 1e-10,
            "d={d}: {gw} {}",
            gm.amax()
        );
    }
}

#[test]
fn product_minimiser_is_strict() {
    let mut r = common::rng(23);
    for d in 1..=4 {
        let rc = random_regime(&mut r, d);
        let sol = closed_form_solution(&rc).unwrap();
        let base = simplified_loss(&sol.restricted(), &rc);
        for _ in 0..10 {
            let eta = common::gauss_matrix(&mut r, d, d, 1.0);
            let eta = &eta / eta.norm() * 1e-3;
            let moved = RestrictedParams::new(1.0, &sol.product + eta);
            assert!(simplified_loss(&moved, &rc) > base);
        }
    }
}

/// Flattened value-row and key-query entries, the only coordinates the
/// surrogate depends on.
fn live_coords(d: usize) -> Vec<(bool, usize, usize)> {
    let mut v: Vec<_> = (0..=d).map(|j| (true, d, j)).collect();
    for i in 0..=d {
        for j in 0..d {
            v.push((false, i, j));
        }
    }
    v
}

fn bump(p: &LsaParams, c: (bool, usize, usize), h: f64) -> LsaParams {
    let mut q = p.clone();
    if c.0 {
        q.wv_mut()[(c.1, c.2)] += h;
    } else {
        q.wkq_mut()[(c.1, c.2)] += h;
    }
    q
}

fn entry(p: &LsaParams, c: (bool, usize, usize)) -> f64 {
    if c.0 {
        p.wv()[(c.1, c.2)]
    } else {
        p.wkq()[(c.1, c.2)]
    }
}

#[test]
fn full_surrogate_gradient_matches_differences_on_fixed_batch() {
    let mut r = common::rng(24);
    for d in 1..=3 {
        let cov = common::random_cov(&mut r, d);
        let rc = RegimeConstants::new(5, 3, 0.8, &cov).unwrap();
        let params = common::random_general(&mut r, d, 1.0);
        let stream = RngStream::new(9, d as u64);
        let g = general_surrogate_gradient_mc(&params, &rc, 64, &stream).unwrap();
        let f = |p: &LsaParams| general_surrogate_mc(p, &rc, 64, &stream).unwrap().total();
        let coords = live_coords(d);
        let an: Vec<f64> = coords.iter().map(|&c| entry(&g.grad, c)).collect();
        let fd: Vec<f64> = coords
            .iter()
            .map(|&c| (f(&bump(&params, c, H)) - f(&bump(&params, c, -H))) / (2.0 * H))
            .collect();
        assert!(rel(&an, &fd) < 1e-6, "d={d}: {}", rel(&an, &fd));
        // Dead blocks have exactly zero gradient.
        assert_eq!(g.grad.v11().amax(), 0.0);
        assert_eq!(g.grad.kq12().amax(), 0.0);
        assert_eq!(g.grad.kq22(), 0.0);
    }
}

#[test]
fn attacked_loss_gradient_matches_differences() {
    let mut r = common::rng(25);
    for d in 1..=3 {
        let cov = common::random_cov(&mut r, d);
        let task = sample_task(&RngStream::new(3, d as u64), &cov, 4, 2).unwrap();
        let pert = project_perturbation(&common::gauss_matrix(&mut r, d, 2, 1.0), 0.7).unwrap();
        let params = common::random_general(&mut r, d, 1.0);
        let (_, g) = attacked_loss_gradient(&params, &task, &pert).unwrap();
        let f = |p: &LsaParams| attacked_loss_gradient(p, &task, &pert).unwrap().0;
        let coords = live_coords(d);
        let an: Vec<f64> = coords.iter().map(|&c| entry(&g, c)).collect();
        let fd: Vec<f64> = coords
            .iter()
            .map(|&c| (f(&bump(&params, c, H)) - f(&bump(&params, c, -H))) / (2.0 * H))
            .collect();
        assert!(rel(&an, &fd) < 1e-6, "d={d}: {}", rel(&an, &fd));
    }
}

#[test]
fn identity_covariance_has_scalar_optimum() {
    let rc = RegimeConstants::new(32, 4, 2.0, &CovarianceSpec::identity(4).unwrap()).unwrap();
    let sol = closed_form_solution(&rc).unwrap();
    let c = sol.product[(0, 0)];
    assert!((&sol.product - Matrix::identity(4, 4) * c).amax() < 1e-15);
}
