//! The single-layer linear self-attention model.
//!
//! Both weight matrices are `(d+1)×(d+1)` and partitioned as
//!
//! ```text
//! W = [ W11   w12 ]      W11: d×d, w12: d×1
//!     [ w21ᵀ  w22 ]      w21: d×1, w22: scalar
//! ```
//!
//! The prediction for the query only involves the last row of `W^V` and the
//! first `d` columns of `W^{KQ}`.

use crate::linalg::frobenius;
use crate::stochastics::CovarianceSpec;
use crate::task::PromptEmbedding;
use crate::{Error, Matrix, Result, Vector};
use nalgebra::{DMatrixView, DMatrixViewMut};
use serde::{Deserialize, Serialize};

/// LSA parameters θ = (W^V, W^{KQ}).
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    d: usize,
    wv: Matrix,
    wkq: Matrix,
}

macro_rules! blocks {
    ($field:ident, $b11:ident, $b11m:ident, $b12:ident, $b12m:ident, $b21:ident, $b21m:ident, $b22:ident, $b22m:ident) => {
        pub fn $b11(&self) -> DMatrixView<'_, f64> {
            self.$field.view((0, 0), (self.d, self.d))
        }
        pub fn $b11m(&mut self) -> DMatrixViewMut<'_, f64> {
            self.$field.view_mut((0, 0), (self.d, self.d))
        }
        pub fn $b12(&self) -> DMatrixView<'_, f64> {
            self.$field.view((0, self.d), (self.d, 1))
        }
        pub fn $b12m(&mut self) -> DMatrixViewMut<'_, f64> {
            let d = self.d;
            self.$field.view_mut((0, d), (d, 1))
        }
        /// The `w21ᵀ` row (stored as the last row, first `d` columns).
        pub fn $b21(&self) -> DMatrixView<'_, f64> {
            self.$field.view((self.d, 0), (1, self.d))
        }
        pub fn $b21m(&mut self) -> DMatrixViewMut<'_, f64> {
            let d = self.d;
            self.$field.view_mut((d, 0), (1, d))
        }
        pub fn $b22(&self) -> f64 {
            self.$field[(self.d, self.d)]
        }
        pub fn $b22m(&mut self) -> &mut f64 {
            let d = self.d;
            &mut self.$field[(d, d)]
        }
    };
}

impl LsaParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            wv: Matrix::zeros(d + 1, d + 1),
            wkq: Matrix::zeros(d + 1, d + 1),
        }
    }

    pub fn from_matrices(wv: Matrix, wkq: Matrix) -> Result<Self> {
        let n = wv.nrows();
        if n < 2 || wv.shape() != (n, n) || wkq.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "W^V is {:?} and W^KQ is {:?}; both must be (d+1)x(d+1) with d >= 1",
                wv.shape(),
                wkq.shape()
            )));
        }
        Ok(Self { d: n - 1, wv, wkq })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn wv(&self) -> &Matrix {
        &self.wv
    }

    pub fn wkq(&self) -> &Matrix {
        &self.wkq
    }

    pub fn wv_mut(&mut self) -> &mut Matrix {
        &mut self.wv
    }

    pub fn wkq_mut(&mut self) -> &mut Matrix {
        &mut self.wkq
    }

    blocks!(wv, v11, v11_mut, v12, v12_mut, v21, v21_mut, v22, v22_mut);
    blocks!(wkq, kq11, kq11_mut, kq12, kq12_mut, kq21, kq21_mut, kq22, kq22_mut);

    /// `(w21ᵀ, w22)` of W^V as a `d+1` vector.
    pub fn value_row(&self) -> Vector {
        self.wv.row(self.d).transpose()
    }

    /// `[W11; w21ᵀ] x` for W^{KQ}, the key-query image of a query point.
    pub fn key_query_image(&self, x: &Vector) -> Vector {
        self.wkq.columns(0, self.d) * x
    }

    /// Project onto the restricted class (drops every block but `w^V_22` and `W^{KQ}_11`).
    pub fn restricted(&self) -> RestrictedParams {
        RestrictedParams {
            w22: self.v22(),
            w11: self.kq11().into_owned(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            d: self.d,
            wv: row_major(&self.wv),
            wkq: row_major(&self.wkq),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let n = c.d + 1;
        if c.wv.len() != n * n || c.wkq.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint for d={} needs {} entries per matrix",
                c.d,
                n * n
            )));
        }
        Self::from_matrices(
            Matrix::from_row_slice(n, n, &c.wv),
            Matrix::from_row_slice(n, n, &c.wkq),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }
}

fn row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().iter().cloned().collect()
}

/// On-disk parameter checkpoint. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub d: usize,
    #[serde(rename = "WV")]
    pub wv: Vec<f64>,
    #[serde(rename = "WKQ")]
    pub wkq: Vec<f64>,
}

/// Parameters with only `w^V_22` and `W^{KQ}_11` nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedParams {
    pub w22: f64,
    pub w11: Matrix,
}

impl RestrictedParams {
    pub fn new(w22: f64, w11: Matrix) -> Self {
        Self { w22, w11 }
    }

    pub fn dim(&self) -> usize {
        self.w11.nrows()
    }

    /// `w22·W11`, the only combination the restricted loss depends on.
    pub fn product(&self) -> Matrix {
        &self.w11 * self.w22
    }

    /// `|w22² − ‖W11‖_F²|`.
    pub fn balance_gap(&self) -> f64 {
        (self.w22 * self.w22 - self.w11.norm_squared()).abs()
    }

    pub fn embed(&self) -> LsaParams {
        embed_restricted(self)
    }
}

pub fn embed_restricted(r: &RestrictedParams) -> LsaParams {
    let mut p = LsaParams::zeros(r.dim());
    *p.v22_mut() = r.w22;
    p.kq11_mut().copy_from(&r.w11);
    p
}

/// Initialisation scale σ and shape Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub sigma: f64,
    pub theta: Matrix,
}

impl InitSpec {
    pub fn new(sigma: f64, theta: Matrix) -> Self {
        Self { sigma, theta }
    }

    /// σ with the default Θ = d^{-1/4} I.
    pub fn with_default_theta(sigma: f64, d: usize) -> Self {
        Self::new(sigma, default_theta(d))
    }

    pub fn theta_theta_t(&self) -> Matrix {
        &self.theta * self.theta.transpose()
    }

    fn check_shape(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInit(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        let norm = frobenius(&self.theta_theta_t());
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInit(format!(
                "||Theta Theta^T||_F = {norm}, expected 1"
            )));
        }
        Ok(())
    }

    /// Full validity check, including `ΘΛ ≠ 0` against the task covariance.
    pub fn validate(&self, cov: &CovarianceSpec) -> Result<()> {
        if self.theta.shape() != (cov.dim(), cov.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "Theta is {:?}, covariance has d={}",
                self.theta.shape(),
                cov.dim()
            )));
        }
        self.check_shape()?;
        if frobenius(&(&self.theta * cov.lambda())) <= 1e-12 {
            return Err(Error::InvalidInit("Theta Lambda vanishes".into()));
        }
        Ok(())
    }

    pub fn restricted(&self) -> RestrictedParams {
        RestrictedParams::new(self.sigma, self.theta_theta_t() * self.sigma)
    }
}

/// `W^V = [[0,0],[0,σ]]`, `W^{KQ} = [[σΘΘᵀ,0],[0,0]]`.
pub fn init_params(spec: &InitSpec, d: usize) -> Result<LsaParams> {
    if spec.theta.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "Theta is {:?}, expected {d}x{d}",
            spec.theta.shape()
        )));
    }
    spec.check_shape()?;
    Ok(embed_restricted(&spec.restricted()))
}

/// `d^{-1/4} I_d`, for which `‖ΘΘᵀ‖_F = 1`.
pub fn default_theta(d: usize) -> Matrix {
    Matrix::identity(d, d) * (d as f64).powf(-0.25)
}

/// Bottom-right entry of the LSA output for prompt `E`:
/// `(w^V_21ᵀ, w^V_22) · (E Eᵀ / ctx) · [W^{KQ}_11; w^{KQ}_21ᵀ] · x_q`.
pub fn predict(params: &LsaParams, e: &PromptEmbedding) -> Result<f64> {
    let m = e.matrix();
    let d = params.dim();
    if m.nrows() != d + 1 {
        return Err(Error::DimensionMismatch(format!(
            "prompt has {} rows, model expects {}",
            m.nrows(),
            d + 1
        )));
    }
    if m.ncols() < 2 || e.ctx() + 1 != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "prompt has {} columns and ctx {}",
            m.ncols(),
            e.ctx()
        )));
    }
    let xq: Vector = m.column(e.ctx()).rows(0, d).into_owned();
    let u = params.key_query_image(&xq);
    let su = m * (m.transpose() * u) / e.ctx() as f64;
    Ok(params.value_row().dot(&su))
}
