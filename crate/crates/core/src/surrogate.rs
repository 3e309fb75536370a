//! The surrogate adversarial-training loss `ℓ1 + ℓ2 + ℓ3 + ℓ4`, its closed
//! form on the restricted class, and the regime constants that govern
//! training.

use crate::linalg::{frobenius, trace};
use crate::model::{InitSpec, LsaParams, RestrictedParams};
use crate::stochastics::{mean_stderr, CovarianceSpec, RngStream};
use crate::task::{assemble_adversarial, sample_task, Perturbation};
use crate::{Error, Matrix, Result, Vector};
use rayon::prelude::*;

/// `Γ(M)`, `ψ(M)` and everything derived from them for one `(N, M, ε, Λ)`.
#[derive(Debug, Clone)]
pub struct RegimeConstants {
    pub n: usize,
    pub m: usize,
    pub eps: f64,
    pub cov: CovarianceSpec,
    pub gamma: Matrix,
    pub psi: f64,
    operator: Matrix,
}

impl RegimeConstants {
    pub fn new(n: usize, m: usize, eps: f64, cov: &CovarianceSpec) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be nonnegative, got {eps}"
            )));
        }
        let (gamma, psi) = gamma_psi(n, m, cov)?;
        let mut rc = Self {
            n,
            m,
            eps,
            cov: cov.clone(),
            gamma,
            psi,
            operator: Matrix::zeros(0, 0),
        };
        rc.operator = rc.apply(|l| rc.op_eigen(l));
        Ok(rc)
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    /// Eigenvalue of `Γ` belonging to eigenvalue `l` of `Λ`.
    fn gamma_eigen(&self, l: f64) -> f64 {
        let s = (self.n + self.m) as f64;
        (s + 1.0) / s * l + self.cov.trace() / s
    }

    /// Eigenvalue of `ΓΛ + ε²ψI` belonging to eigenvalue `l` of `Λ`.
    pub fn op_eigen(&self, l: f64) -> f64 {
        self.gamma_eigen(l) * l + self.eps * self.eps * self.psi
    }

    /// `ΓΛ + ε²ψI`. Symmetric and a function of `Λ`, so it commutes with `Λ`.
    pub fn operator(&self) -> &Matrix {
        &self.operator
    }

    /// `Q diag(f(λ_i)) Qᵀ` over the eigenpairs of `Λ`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Matrix {
        self.cov.apply(f)
    }

    /// `max_i a(λ_i)`, the stiffness of the restricted flow.
    pub fn operator_max_eigen(&self) -> f64 {
        self.cov
            .eigenvalues()
            .iter()
            .map(|&l| self.op_eigen(l))
            .fold(0.0, f64::max)
    }

    /// `‖(ΓΛ + ε²ψI)Λ^{-1}‖₂`.
    pub fn operator_over_lambda_norm(&self) -> f64 {
        self.cov
            .eigenvalues()
            .iter()
            .map(|&l| self.op_eigen(l) / l)
            .fold(0.0, f64::max)
    }
}

/// `Γ(M) = ((N+M+1)/(N+M))Λ + (Tr Λ/(N+M)) I` and `ψ(M) = M² Tr Λ/(N+M)²`.
pub fn gamma_psi(n: usize, m: usize, cov: &CovarianceSpec) -> Result<(Matrix, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let d = cov.dim();
    let s = (n + m) as f64;
    let tr = cov.trace();
    let gamma = cov.lambda() * ((s + 1.0) / s) + Matrix::identity(d, d) * (tr / s);
    let psi = (m * m) as f64 * tr / (s * s);
    Ok((gamma, psi))
}

/// `2 Tr[(ΓΛ+ε²ψI) P Λ Pᵀ] − 4 Tr[P Λ²] + 2 Tr Λ` with `P = w22·W11`.
pub fn simplified_loss(r: &RestrictedParams, rc: &RegimeConstants) -> f64 {
    let lam = rc.cov.lambda();
    let p = r.product();
    let quad = trace(&(rc.operator() * &p * lam * p.transpose()));
    let lin = trace(&(&p * lam * lam));
    2.0 * quad - 4.0 * lin + 2.0 * rc.cov.trace()
}

/// Gradient of [`simplified_loss`] as `(∂/∂w22, ∂/∂W11)`.
pub fn simplified_gradient(r: &RestrictedParams, rc: &RegimeConstants) -> (f64, Matrix) {
    let lam = rc.cov.lambda();
    let a = rc.operator();
    let w = r.w22;
    let lam2 = lam * lam;
    let aw = a * &r.w11 * lam;
    let g_w11 = &aw * (4.0 * w * w) - &lam2 * (4.0 * w);
    let g_w22 = 4.0 * w * trace(&(&aw * r.w11.transpose())) - 4.0 * trace(&(&r.w11 * lam2));
    (g_w22, g_w11)
}

/// Monte Carlo estimate of the four surrogate terms. `ℓ2` is analytic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    /// Standard error of the per-task sum `ℓ1 + ℓ3 + ℓ4`.
    pub stderr: f64,
}

impl SurrogateTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 + self.l3 + self.l4
    }
}

/// Monte Carlo gradient of the full surrogate, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct SurrogateGradient {
    pub terms: SurrogateTerms,
    pub grad: LsaParams,
    /// Entrywise standard error of `grad`.
    pub stderr: LsaParams,
}

struct TaskContribution {
    l1: f64,
    l3: f64,
    l4: f64,
    grad_a: Vector,
    grad_b: Matrix,
}

/// Coefficients `(k2, k3)` with `ℓ2 = k2·‖a_x‖²·Tr(W11ΛW11ᵀ)` and
/// `ℓ3, ℓ4 = k3·(...)`.
fn term_scales(rc: &RegimeConstants) -> (f64, f64) {
    let s = (rc.n + rc.m) as f64;
    let m = rc.m as f64;
    let e2 = rc.eps * rc.eps;
    (2.0 * e2 * e2 * m * m / (s * s), 2.0 * e2 * m / (s * s))
}

fn task_contribution(
    params: &LsaParams,
    rc: &RegimeConstants,
    stream: &RngStream,
    with_grad: bool,
) -> Result<TaskContribution> {
    let d = params.dim();
    let task = sample_task(stream, &rc.cov, rc.n, rc.m)?;
    let e = assemble_adversarial(&task, &Perturbation::zeros(d, rc.m, 0.0))?;
    let em = e.matrix();
    let s = (rc.n + rc.m) as f64;
    let (_, k3) = term_scales(rc);

    let a = params.value_row();
    let b = params.key_query_image(&task.x_q);
    let sb = em * em.tr_mul(&b);
    let r = a.dot(&sb) / s - task.y_q;
    let l1 = 2.0 * r * r;

    // Suffix columns z_i = (x_i; y_i).
    let z = em.columns(rc.n, rc.m);
    let qa = z * z.tr_mul(&a);
    let qb = z * z.tr_mul(&b);
    let aqa = a.dot(&qa);
    let bqb = b.dot(&qb);
    let bx = b.rows(0, d);
    let bx2 = bx.norm_squared();
    let ax = a.rows(0, d);
    let ax2 = ax.norm_squared();
    let l3 = k3 * bx2 * aqa;
    let l4 = k3 * ax2 * bqb;

    let (grad_a, grad_b) = if with_grad {
        let sa = em * em.tr_mul(&a);
        let mut ga = &sb * (4.0 * r / s) + &qa * (2.0 * k3 * bx2);
        ga.rows_mut(0, d).axpy(2.0 * k3 * bqb, &ax, 1.0);
        let xq_t = task.x_q.transpose();
        let mut gb = &sa * (4.0 * r / s) * &xq_t + &qb * (2.0 * k3 * ax2) * &xq_t;
        let top = bx * (2.0 * k3 * aqa) * &xq_t;
        let mut head = gb.rows_mut(0, d);
        head += &top;
        (ga, gb)
    } else {
        (Vector::zeros(0), Matrix::zeros(0, 0))
    };
    Ok(TaskContribution {
        l1,
        l3,
        l4,
        grad_a,
        grad_b,
    })
}

fn check_mc_inputs(params: &LsaParams, rc: &RegimeConstants, n_tasks: usize) -> Result<()> {
    if n_tasks < 2 {
        return Err(Error::InvalidArgument(
            "Monte Carlo needs at least 2 tasks".into(),
        ));
    }
    if params.dim() != rc.dim() {
        return Err(Error::DimensionMismatch(format!(
            "params have d={}, regime has d={}",
            params.dim(),
            rc.dim()
        )));
    }
    Ok(())
}

fn collect_tasks(
    params: &LsaParams,
    rc: &RegimeConstants,
    n_tasks: usize,
    stream: &RngStream,
    with_grad: bool,
) -> Result<Vec<TaskContribution>> {
    (0..n_tasks as u64)
        .into_par_iter()
        .map(|t| task_contribution(params, rc, &stream.substream(t), with_grad))
        .collect()
}

fn l2_value(params: &LsaParams, rc: &RegimeConstants) -> f64 {
    let (k2, _) = term_scales(rc);
    let w11 = params.kq11();
    k2 * params.v21().norm_squared() * trace(&(w11 * rc.cov.lambda() * w11.transpose()))
}

fn summarize(
    params: &LsaParams,
    rc: &RegimeConstants,
    tasks: &[TaskContribution],
) -> SurrogateTerms {
    let n = tasks.len() as f64;
    let l1 = tasks.iter().map(|t| t.l1).sum::<f64>() / n;
    let l3 = tasks.iter().map(|t| t.l3).sum::<f64>() / n;
    let l4 = tasks.iter().map(|t| t.l4).sum::<f64>() / n;
    let per_task: Vec<f64> = tasks.iter().map(|t| t.l1 + t.l3 + t.l4).collect();
    let (_, stderr) = mean_stderr(&per_task);
    SurrogateTerms {
        l1,
        l2: l2_value(params, rc),
        l3,
        l4,
        stderr,
    }
}

/// Monte Carlo estimate of the surrogate loss over `n_tasks` tasks drawn from
/// per-task substreams of `stream`.
pub fn general_surrogate_mc(
    params: &LsaParams,
    rc: &RegimeConstants,
    n_tasks: usize,
    stream: &RngStream,
) -> Result<SurrogateTerms> {
    check_mc_inputs(params, rc, n_tasks)?;
    let tasks = collect_tasks(params, rc, n_tasks, stream, false)?;
    Ok(summarize(params, rc, &tasks))
}

/// Monte Carlo gradient of the surrogate loss with entrywise standard errors.
/// Only the value row of `W^V` and the first `d` columns of `W^{KQ}` can be
/// nonzero; every other entry is exactly zero.
pub fn general_surrogate_gradient_mc(
    params: &LsaParams,
    rc: &RegimeConstants,
    n_tasks: usize,
    stream: &RngStream,
) -> Result<SurrogateGradient> {
    check_mc_inputs(params, rc, n_tasks)?;
    let d = params.dim();
    let tasks = collect_tasks(params, rc, n_tasks, stream, true)?;
    let terms = summarize(params, rc, &tasks);
    let nf = n_tasks as f64;

    let mut sum_a = Vector::zeros(d + 1);
    let mut sq_a = Vector::zeros(d + 1);
    let mut sum_b = Matrix::zeros(d + 1, d);
    let mut sq_b = Matrix::zeros(d + 1, d);
    for t in &tasks {
        sum_a += &t.grad_a;
        sq_a += t.grad_a.component_mul(&t.grad_a);
        sum_b += &t.grad_b;
        sq_b += t.grad_b.component_mul(&t.grad_b);
    }
    let mean_a = sum_a / nf;
    let mean_b = sum_b / nf;
    let se = |sq: f64, mean: f64| ((sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0) / nf).sqrt();

    let mut grad = LsaParams::zeros(d);
    let mut stderr = LsaParams::zeros(d);
    for i in 0..=d {
        grad.wv_mut()[(d, i)] = mean_a[i];
        stderr.wv_mut()[(d, i)] = se(sq_a[i], mean_a[i]);
        for j in 0..d {
            grad.wkq_mut()[(i, j)] = mean_b[(i, j)];
            stderr.wkq_mut()[(i, j)] = se(sq_b[(i, j)], mean_b[(i, j)]);
        }
    }

    // Analytic ℓ2 contribution.
    let (k2, _) = term_scales(rc);
    let w11 = params.kq11().into_owned();
    let ax = params.v21().transpose();
    let tr = trace(&(&w11 * rc.cov.lambda() * w11.transpose()));
    let g_ax = &ax * (2.0 * k2 * tr);
    let g_w11 = &w11 * rc.cov.lambda() * (2.0 * k2 * ax.norm_squared());
    let mut v21 = grad.v21_mut();
    v21 += &g_ax.transpose();
    let mut kq11 = grad.kq11_mut();
    kq11 += &g_w11;

    Ok(SurrogateGradient {
        terms,
        grad,
        stderr,
    })
}

/// `√(2 / (d·‖(ΓΛ+ε²ψI)Λ^{-1}‖₂))`, the largest initial scale for which the
/// restricted flow is guaranteed to converge.
pub fn sigma_threshold(rc: &RegimeConstants) -> f64 {
    (2.0 / (rc.dim() as f64 * rc.operator_over_lambda_norm())).sqrt()
}

/// Lower bound `ν` on `w22(t)²` and PL constant `μ` for a given initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuMu {
    pub nu: f64,
    pub mu: f64,
    /// `false` when σ is at or above the threshold, in which case `ν ≤ 0`
    /// and neither constant certifies anything.
    pub valid: bool,
}

/// `ν = σ²‖ΛΘ‖_F²(2 − dσ²‖(ΓΛ+ε²ψI)Λ^{-1}‖₂) / (2d‖Λ²‖₂)` and
/// `μ = 8ν / (‖(ΓΛ+ε²ψI)^{-1/2}‖_F² ‖Λ^{-1/2}‖_F²)`.
pub fn nu_mu_constants(spec: &InitSpec, rc: &RegimeConstants) -> NuMu {
    let d = rc.dim() as f64;
    let s2 = spec.sigma * spec.sigma;
    let eigs = rc.cov.eigenvalues();
    let lmax = eigs.iter().cloned().fold(0.0, f64::max);
    let lt = frobenius(&(rc.cov.lambda() * &spec.theta));
    let nu =
        s2 * lt * lt * (2.0 - d * s2 * rc.operator_over_lambda_norm()) / (2.0 * d * lmax * lmax);
    let inv_op: f64 = eigs.iter().map(|&l| 1.0 / rc.op_eigen(l)).sum();
    let inv_lam: f64 = eigs.iter().map(|&l| 1.0 / l).sum();
    let mu = 8.0 * nu / (inv_op * inv_lam);
    NuMu {
        nu,
        mu,
        valid: nu > 0.0,
    }
}
