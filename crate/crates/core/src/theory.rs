//! Closed-form optimum of surrogate training, the robust generalisation
//! bound, and its order terms.

use crate::linalg::{frobenius, trace};
use crate::model::RestrictedParams;
use crate::surrogate::RegimeConstants;
use crate::{Error, Matrix, Result};
use serde::{Deserialize, Serialize};

/// The converged restricted parameters for a training regime.
#[derive(Debug, Clone)]
pub struct ClosedFormSolution {
    /// `w22·W11 = (ΓΛ + ε²ψI)^{-1}Λ`.
    pub product: Matrix,
    pub w22: f64,
    pub w11: Matrix,
    pub regime: RegimeConstants,
}

impl ClosedFormSolution {
    pub fn restricted(&self) -> RestrictedParams {
        RestrictedParams::new(self.w22, self.w11.clone())
    }
}

fn check_regular(rc: &RegimeConstants) -> Result<()> {
    for &l in rc.cov.eigenvalues() {
        let a = rc.op_eigen(l);
        if !(a > 0.0) {
            return Err(Error::SingularRegime(format!(
                "operator eigenvalue {a} at Lambda eigenvalue {l}"
            )));
        }
    }
    Ok(())
}

/// `(ΓΛ + ε²ψI)^{-1}Λ`, split as `w22 = √‖P‖_F`, `W11 = P/w22` so that
/// `w22² = ‖W11‖_F²`.
pub fn closed_form_solution(rc: &RegimeConstants) -> Result<ClosedFormSolution> {
    check_regular(rc)?;
    let product = rc.apply(|l| l / rc.op_eigen(l));
    let w22 = frobenius(&product).sqrt();
    let w11 = &product / w22;
    Ok(ClosedFormSolution {
        product,
        w22,
        w11,
        regime: rc.clone(),
    })
}

/// `2 Tr Λ − 2 Tr[Λ³(ΓΛ + ε²ψI)^{-1}]`, the minimum of the simplified loss.
pub fn surrogate_min_value(rc: &RegimeConstants) -> f64 {
    let s: f64 = rc
        .cov
        .eigenvalues()
        .iter()
        .map(|&l| l * l * l / rc.op_eigen(l))
        .sum();
    2.0 * rc.cov.trace() - 2.0 * s
}

/// `loss − min` of the simplified loss in completed-square form
/// `2‖A^{1/2}(PΛ^{1/2} − A^{-1}Λ^{3/2})‖_F²`, which avoids the cancellation
/// of subtracting two nearly equal losses.
pub fn surrogate_excess(r: &RestrictedParams, rc: &RegimeConstants) -> f64 {
    let sqrt_l = rc.apply(f64::sqrt);
    let target = rc.apply(|l| l * l.sqrt() / rc.op_eigen(l));
    let sqrt_a = rc.apply(|l| rc.op_eigen(l).sqrt());
    let dev = r.product() * sqrt_l - target;
    2.0 * (sqrt_a * dev).norm_squared()
}

fn check_pair(train: &RegimeConstants, test: &RegimeConstants) -> Result<()> {
    if train.n != test.n || train.cov.lambda() != test.cov.lambda() {
        return Err(Error::InvalidArgument(
            "train and test regimes must share N and Lambda".into(),
        ));
    }
    Ok(())
}

/// `2 Tr[Λ³ A_test A_train^{-2} + Λ]` with `A = ΓΛ + ε²ψI`.
pub fn robust_bound(train: &RegimeConstants, test: &RegimeConstants) -> Result<f64> {
    check_pair(train, test)?;
    check_regular(train)?;
    let s: f64 = train
        .cov
        .eigenvalues()
        .iter()
        .map(|&l| {
            let at = train.op_eigen(l);
            l * l * l * test.op_eigen(l) / (at * at)
        })
        .sum();
    Ok(2.0 * (s + train.cov.trace()))
}

/// Same bound evaluated with dense matrix algebra instead of eigenvalues.
pub fn robust_bound_dense(train: &RegimeConstants, test: &RegimeConstants) -> Result<f64> {
    check_pair(train, test)?;
    let lam = train.cov.lambda();
    let inv = train
        .operator()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularRegime("training operator is singular".into()))?;
    let inner = lam * lam * lam * test.operator() * &inv * &inv + lam;
    Ok(2.0 * trace(&inner))
}

/// Order magnitudes `(d, d²/N, N²M_test²/M_train⁴)` of the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorollaryTerms {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

pub fn corollary_terms(train: &RegimeConstants, test: &RegimeConstants) -> Result<CorollaryTerms> {
    if train.m == 0 {
        return Err(Error::DivisionByZero("M_train = 0".into()));
    }
    let d = train.dim() as f64;
    let n = train.n as f64;
    let mtr = train.m as f64;
    let mte = test.m as f64;
    Ok(CorollaryTerms {
        t1: d,
        t2: d * d / n,
        t3: n * n * mte * mte / (mtr * mtr * mtr * mtr),
    })
}
