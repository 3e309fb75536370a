#![allow(dead_code)]

use advicl::{CovarianceSpec, LsaParams, Matrix, RestrictedParams, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_restricted(rng: &mut ChaCha8Rng, d: usize) -> RestrictedParams {
    let w22 = rng.random_range(0.2..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    RestrictedParams::new(w22, gauss_matrix(rng, d, d, 0.6 / (d as f64).sqrt()))
}

/// Every block filled, including the two off-blocks that feed the prediction.
pub fn random_general(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> LsaParams {
    let s = scale / ((d + 1) as f64).sqrt();
    LsaParams::from_matrices(
        gauss_matrix(rng, d + 1, d + 1, s),
        gauss_matrix(rng, d + 1, d + 1, s),
    )
    .unwrap()
}

/// A random positive-definite covariance with eigenvalues in [0.5, 2].
pub fn random_cov(rng: &mut ChaCha8Rng, d: usize) -> CovarianceSpec {
    let q = gauss_matrix(rng, d, d, 1.0).qr().q();
    let eig = Vector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
    let l = &q * Matrix::from_diagonal(&eig) * q.transpose();
    let l = (&l + l.transpose()) * 0.5;
    CovarianceSpec::dense(&l, 0.0).unwrap()
}

pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm()
}
