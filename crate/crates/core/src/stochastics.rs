//! Deterministic random streams and Gaussian sampling against a
//! positive-definite covariance.

use crate::linalg::{frobenius, max_abs_asymmetry, trace, SymEig};
use crate::{Error, Matrix, Result, Vector};
use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Largest diagonal jitter ever added while factorising a covariance.
pub const MAX_JITTER: f64 = 1e-10;

/// An immutable descriptor of a random stream.
///
/// Sampling never mutates the descriptor: each call to [`RngStream::rng`]
/// rebuilds the generator from `(seed, stream_id)`, so two workers holding the
/// same descriptor observe the same sequence regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream `index` of this stream. Children of distinct parents or
    /// with distinct indices land on distinct stream ids with overwhelming
    /// probability.
    pub fn substream(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream::new(self.seed, id)
    }
}

/// How a covariance was specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovKind {
    Identity,
    Diagonal {
        values: Vec<f64>,
    },
    /// Row-major `d×d` entries.
    Dense {
        matrix: Vec<f64>,
    },
}

/// A positive-definite covariance Λ with a lower-triangular factor `L`
/// (`L·Lᵀ = Λ`) and a cached eigendecomposition for matrix functions.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    d: usize,
    lambda: Matrix,
    factor: Matrix,
    kind: CovKind,
    eig: SymEig,
}

impl CovarianceSpec {
    pub fn identity(d: usize) -> Result<Self> {
        make_covariance(&CovKind::Identity, d, 0.0)
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        make_covariance(
            &CovKind::Diagonal {
                values: values.to_vec(),
            },
            values.len(),
            0.0,
        )
    }

    pub fn dense(lambda: &Matrix, jitter: f64) -> Result<Self> {
        if !lambda.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        let d = lambda.nrows();
        let matrix = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| lambda[(i, j)])
            .collect();
        make_covariance(&CovKind::Dense { matrix }, d, jitter)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> &Matrix {
        &self.lambda
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn kind(&self) -> &CovKind {
        &self.kind
    }

    pub fn trace(&self) -> f64 {
        trace(&self.lambda)
    }

    /// Eigenvalues of Λ in the order of [`CovarianceSpec::apply`]'s basis.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eig.values
    }

    /// `f(Λ)` via the symmetric eigendecomposition. All functions of Λ built
    /// this way commute with each other.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Matrix {
        self.eig.apply(f)
    }
}

/// Build a covariance of the given kind and dimension.
///
/// Dense inputs are factorised with Cholesky; if that fails, a diagonal jitter
/// of at most [`MAX_JITTER`] is added once before giving up.
pub fn make_covariance(kind: &CovKind, d: usize, jitter: f64) -> Result<CovarianceSpec> {
    if d == 0 {
        return Err(Error::InvalidArgument(
            "dimension must be at least 1".into(),
        ));
    }
    let lambda = match kind {
        CovKind::Identity => Matrix::identity(d, d),
        CovKind::Diagonal { values } => {
            if values.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{} diagonal values for d={d}",
                    values.len()
                )));
            }
            if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::NotPositiveDefinite(format!(
                    "diagonal value {v} is not strictly positive"
                )));
            }
            Matrix::from_diagonal(&Vector::from_column_slice(values))
        }
        CovKind::Dense { matrix } => {
            if matrix.len() != d * d {
                return Err(Error::DimensionMismatch(format!(
                    "{} dense entries for d={d}",
                    matrix.len()
                )));
            }
            let m = Matrix::from_row_slice(d, d, matrix);
            let asym = max_abs_asymmetry(&m);
            let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            if asym > 1e-12 * scale {
                return Err(Error::NotSymmetric(asym));
            }
            (&m + m.transpose()) * 0.5
        }
    };

    let (lambda, factor) = match kind {
        CovKind::Identity => (lambda, Matrix::identity(d, d)),
        CovKind::Diagonal { values } => {
            let roots: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
            (lambda, Matrix::from_diagonal(&Vector::from_vec(roots)))
        }
        CovKind::Dense { .. } => match Cholesky::new(lambda.clone()) {
            Some(ch) => (lambda, ch.l()),
            None => {
                let j = jitter.clamp(0.0, MAX_JITTER);
                let jittered = &lambda + Matrix::identity(d, d) * j;
                match Cholesky::new(jittered.clone()) {
                    Some(ch) => (jittered, ch.l()),
                    None => {
                        return Err(Error::NotPositiveDefinite(format!(
                            "Cholesky failed after jitter {j:e}"
                        )))
                    }
                }
            }
        },
    };

    let eig = SymEig::new(&lambda);
    if eig.min_value() <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {:e}",
            eig.min_value()
        )));
    }
    debug_assert!(
        frobenius(&(&factor * factor.transpose() - &lambda)) <= 1e-12 * frobenius(&lambda).max(1.0)
    );
    Ok(CovarianceSpec {
        d,
        lambda,
        factor,
        kind: kind.clone(),
        eig,
    })
}

/// `L·z` with `z` standard normal drawn from `rng`.
pub fn sample_with<R: Rng + ?Sized>(rng: &mut R, cov: &CovarianceSpec) -> Vector {
    let z = Vector::from_fn(cov.d, |_, _| rng.sample::<f64, _>(StandardNormal));
    if matches!(cov.kind, CovKind::Identity) {
        z
    } else {
        &cov.factor * z
    }
}

/// One draw from `N(0, Λ)` at the start of `stream`.
pub fn sample_gaussian_vector(stream: &RngStream, cov: &CovarianceSpec) -> Vector {
    sample_with(&mut stream.rng(), cov)
}

/// `E[x xᵀ A x xᵀ] = Λ(A + Aᵀ)Λ + Tr(AΛ)Λ` for `x ~ N(0, Λ)`.
pub fn fourth_moment(cov: &CovarianceSpec, a: &Matrix) -> Matrix {
    let l = cov.lambda();
    let tr = trace(&(a * l));
    l * (a + a.transpose()) * l + l * tr
}

/// `E[xᵀ A x] = Tr(AΛ)` for `x ~ N(0, Λ)`.
pub fn quadratic_form_mean(cov: &CovarianceSpec, a: &Matrix) -> f64 {
    trace(&(a * cov.lambda()))
}

/// Entrywise Monte Carlo mean and standard error of `x xᵀ A x xᵀ`.
pub fn mc_fourth_moment(
    stream: &RngStream,
    cov: &CovarianceSpec,
    a: &Matrix,
    n: usize,
) -> (Matrix, Matrix) {
    let d = cov.dim();
    let mut rng = stream.rng();
    let mut sum = Matrix::zeros(d, d);
    let mut sum_sq = Matrix::zeros(d, d);
    for _ in 0..n {
        let x = sample_with(&mut rng, cov);
        let q = x.dot(&(a * &x));
        let s = &x * x.transpose() * q;
        sum_sq += s.component_mul(&s);
        sum += s;
    }
    mean_and_se(sum, sum_sq, n)
}

/// Monte Carlo mean and standard error of `xᵀ A x`.
pub fn mc_quadratic_form(
    stream: &RngStream,
    cov: &CovarianceSpec,
    a: &Matrix,
    n: usize,
) -> (f64, f64) {
    let mut rng = stream.rng();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let x = sample_with(&mut rng, cov);
        let q = x.dot(&(a * &x));
        sum += q;
        sum_sq += q * q;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n as f64 - 1.0) / n as f64).sqrt())
}

fn mean_and_se(sum: Matrix, sum_sq: Matrix, n: usize) -> (Matrix, Matrix) {
    let nf = n as f64;
    let mean = sum / nf;
    let se = Matrix::from_fn(mean.nrows(), mean.ncols(), |i, j| {
        let m = mean[(i, j)];
        let var = (sum_sq[(i, j)] / nf - m * m).max(0.0) * nf / (nf - 1.0);
        (var / nf).sqrt()
    });
    (mean, se)
}
