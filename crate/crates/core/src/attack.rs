//! Inner maximisation over suffix perturbations and the Monte Carlo robust
//! error estimator.
//!
//! For fixed parameters the prediction is a sum of one quadratic per suffix
//! column: with `a` the value row and `b = [W11; w21ᵀ] x_q`,
//! `ŷ(Δ) = c₀ + (1/n) Σ_j (α_j + a_xᵀδ_j)(β_j + b_xᵀδ_j)`.
//! When `a_x = w^V_21 = 0` each term is affine in `δ_j` and the maximum has a
//! closed form; otherwise projected gradient ascent is used.

use crate::model::{predict, LsaParams};
use crate::stochastics::{mean_stderr, CovarianceSpec, RngStream};
use crate::task::{assemble_adversarial, project_in_place, sample_task, Perturbation, TaskSample};
use crate::{Error, Matrix, Result, Vector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Inner-maximisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps: f64,
    pub m: usize,
    pub pga_steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed_stream: RngStream,
}

impl AttackConfig {
    /// 100 steps of size ε/10 with 8 restarts.
    pub fn new(eps: f64, m: usize, seed_stream: RngStream) -> Self {
        Self {
            eps,
            m,
            pga_steps: 100,
            step_size: if eps > 0.0 { eps / 10.0 } else { 1.0 },
            restarts: 8,
            seed_stream,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be nonnegative, got {}",
                self.eps
            )));
        }
        if !(self.step_size > 0.0) || self.restarts == 0 || self.pga_steps == 0 {
            return Err(Error::InvalidArgument(
                "attack needs step_size > 0, restarts >= 1 and pga_steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one inner maximisation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub delta: Perturbation,
    /// `½(prediction − y_q)²`.
    pub objective: f64,
    pub prediction: f64,
    /// Set when the closed-form maximiser was used.
    pub exact: bool,
}

/// Per-column quadratic decomposition of the attacked prediction.
struct SuffixForm {
    c0: f64,
    alpha: Vector,
    beta: Vector,
    a_x: Vector,
    b_x: Vector,
    inv_n: f64,
}

impl SuffixForm {
    fn new(params: &LsaParams, task: &TaskSample) -> Self {
        let d = params.dim();
        let clean = assemble_adversarial(task, &Perturbation::zeros(d, task.m(), 0.0))
            .expect("zero perturbation always matches the task");
        let e = clean.matrix();
        let a = params.value_row();
        let b = params.key_query_image(&task.x_q);
        let ae = e.tr_mul(&a);
        let be = e.tr_mul(&b);
        let (n, m) = (task.n(), task.m());
        let inv_n = 1.0 / (n + m) as f64;
        let mut c0 = 0.0;
        for j in (0..n).chain(std::iter::once(n + m)) {
            c0 += ae[j] * be[j];
        }
        Self {
            c0: c0 * inv_n,
            alpha: ae.rows(n, m).into_owned(),
            beta: be.rows(n, m).into_owned(),
            a_x: a.rows(0, d).into_owned(),
            b_x: b.rows(0, d).into_owned(),
            inv_n,
        }
    }

    fn prediction(&self, delta: &Matrix) -> f64 {
        let mut s = 0.0;
        for (j, col) in delta.column_iter().enumerate() {
            s += (self.alpha[j] + self.a_x.dot(&col)) * (self.beta[j] + self.b_x.dot(&col));
        }
        self.c0 + s * self.inv_n
    }

    /// `∂ŷ/∂Δ`, one column per suffix position.
    fn prediction_grad(&self, delta: &Matrix) -> Matrix {
        let mut g = Matrix::zeros(delta.nrows(), delta.ncols());
        for (j, col) in delta.column_iter().enumerate() {
            let ua = self.alpha[j] + self.a_x.dot(&col);
            let ub = self.beta[j] + self.b_x.dot(&col);
            g.column_mut(j)
                .copy_from(&((&self.a_x * ub + &self.b_x * ua) * self.inv_n));
        }
        g
    }
}

fn check_task(params: &LsaParams, task: &TaskSample, m: usize) -> Result<()> {
    if params.dim() != task.dim() {
        return Err(Error::DimensionMismatch(format!(
            "params have d={}, task has d={}",
            params.dim(),
            task.dim()
        )));
    }
    if m != task.m() {
        return Err(Error::DimensionMismatch(format!(
            "attack configured for M={m}, task has M={}",
            task.m()
        )));
    }
    Ok(())
}

fn finish(
    params: &LsaParams,
    task: &TaskSample,
    delta: Matrix,
    eps: f64,
    exact: bool,
) -> Result<AttackOutcome> {
    let delta = Perturbation::new(delta, eps)?;
    let prediction = predict(params, &assemble_adversarial(task, &delta)?)?;
    let r = prediction - task.y_q;
    Ok(AttackOutcome {
        delta,
        objective: 0.5 * r * r,
        prediction,
        exact,
    })
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Closed-form maximiser for parameters with `w^V_21 = 0`.
///
/// With `c = w22/(N+M)`, `v = W11 x_q` and `r₀ = ŷ(0) − y_q`, the optimum puts
/// `δ_i = sign(r₀·c·y_i)·ε·v/‖v‖` (sign of `c·y_i` when `r₀ = 0`) and attains
/// `½(|r₀| + |c|·ε·‖v‖·Σ|y_i|)²`.
pub fn attack_exact_affine(
    params: &LsaParams,
    task: &TaskSample,
    eps: f64,
) -> Result<AttackOutcome> {
    check_task(params, task, task.m())?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eps must be nonnegative, got {eps}"
        )));
    }
    let v21 = params.v21().norm();
    if v21 > 0.0 {
        return Err(Error::PreconditionViolated(format!(
            "exact attack needs w21 of W^V to vanish, norm is {v21}"
        )));
    }
    let (d, m) = (params.dim(), task.m());
    let form = SuffixForm::new(params, task);
    let r0 = form.prediction(&Matrix::zeros(d, m)) - task.y_q;
    let c = params.v22() * form.inv_n;
    let v = form.b_x.clone();
    let vn = v.norm();
    let mut delta = Matrix::zeros(d, m);
    if vn > 0.0 && c != 0.0 && eps > 0.0 {
        let dir = v / vn * eps;
        let s0 = if r0 == 0.0 { 1.0 } else { sign(r0) };
        for j in 0..m {
            let y = task.y_sfx[j];
            if y != 0.0 {
                delta.column_mut(j).copy_from(&(&dir * (s0 * sign(c * y))));
            }
        }
    }
    finish(params, task, delta, eps, true)
}

/// Closed-form attack value `½(|r₀| + |c|·ε·‖v‖·Σ|y_i|)²` without building Δ.
pub fn exact_affine_value(params: &LsaParams, task: &TaskSample, eps: f64) -> f64 {
    let form = SuffixForm::new(params, task);
    let r0 = form.prediction(&Matrix::zeros(params.dim(), task.m())) - task.y_q;
    let c = params.v22() * form.inv_n;
    let y1: f64 = task.y_sfx.iter().map(|y| y.abs()).sum();
    let t = r0.abs() + c.abs() * eps * form.b_x.norm() * y1;
    0.5 * t * t
}

fn random_start<R: rand::Rng>(rng: &mut R, d: usize, m: usize, eps: f64) -> Matrix {
    let mut delta = Matrix::zeros(d, m);
    for mut col in delta.column_iter_mut() {
        loop {
            let g = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng));
            let n = g.norm();
            if n > 0.0 {
                col.copy_from(&(g * (eps / n)));
                break;
            }
        }
    }
    delta
}

/// Projected gradient ascent on `Δ ↦ ½(ŷ − y_q)²`.
///
/// Each step moves along the analytic gradient rescaled so its largest column
/// has length `step_size`, then projects back onto the ε-balls. A step that
/// would lower the objective is rejected and the step length halved. The
/// first restart starts at `Δ = 0`; the rest start at random points on the
/// sphere. Returns the best restart, a lower bound on the true maximum.
pub fn attack_pga(
    params: &LsaParams,
    task: &TaskSample,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_task(params, task, cfg.m)?;
    let (d, m) = (params.dim(), task.m());
    if m == 0 || cfg.eps == 0.0 {
        return finish(params, task, Matrix::zeros(d, m), cfg.eps, false);
    }
    let form = SuffixForm::new(params, task);
    let objective = |delta: &Matrix| {
        let r = form.prediction(delta) - task.y_q;
        0.5 * r * r
    };
    let mut rng = cfg.seed_stream.rng();
    let mut best = (f64::NEG_INFINITY, Matrix::zeros(d, m));
    for restart in 0..cfg.restarts {
        let mut delta = if restart == 0 {
            Matrix::zeros(d, m)
        } else {
            random_start(&mut rng, d, m, cfg.eps)
        };
        let mut value = objective(&delta);
        let mut step = cfg.step_size;
        for _ in 0..cfg.pga_steps {
            let r = form.prediction(&delta) - task.y_q;
            let g = form.prediction_grad(&delta) * r;
            let scale = g.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
            if scale == 0.0 {
                break;
            }
            let mut trial = &delta + g * (step / scale);
            project_in_place(&mut trial, cfg.eps);
            let tv = objective(&trial);
            if tv >= value {
                delta = trial;
                value = tv;
            } else {
                step *= 0.5;
            }
        }
        if value > best.0 {
            best = (value, delta);
        }
    }
    finish(params, task, best.1, cfg.eps, false)
}

/// Monte Carlo estimate of the robust error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustErrorEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_tasks: usize,
    /// Every task was attacked with the closed-form maximiser.
    pub exact: bool,
}

/// Averages the attacked loss over `n_tasks` tasks. Task `t` is drawn from
/// substream `2t` of the attack stream and attacked with substream `2t+1`, so
/// the result does not depend on how work is scheduled.
pub fn estimate_robust_error(
    params: &LsaParams,
    cov: &CovarianceSpec,
    n: usize,
    cfg: &AttackConfig,
    n_tasks: usize,
) -> Result<RobustErrorEstimate> {
    if n_tasks < 2 {
        return Err(Error::InvalidArgument("need at least 2 tasks".into()));
    }
    cfg.validate()?;
    let exact = params.v21().norm() == 0.0;
    let objectives: Vec<f64> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let task = sample_task(&cfg.seed_stream.substream(2 * t), cov, n, cfg.m)?;
            let out = if exact {
                attack_exact_affine(params, &task, cfg.eps)?
            } else {
                let local = AttackConfig {
                    seed_stream: cfg.seed_stream.substream(2 * t + 1),
                    ..*cfg
                };
                attack_pga(params, &task, &local)?
            };
            Ok(out.objective)
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_stderr(&objectives);
    Ok(RobustErrorEstimate {
        mean,
        stderr,
        n_tasks,
        exact,
    })
}

/// `½(ŷ − y_q)²` on the attacked prompt and its gradient in the parameters,
/// with `Δ` held fixed.
pub fn attacked_loss_gradient(
    params: &LsaParams,
    task: &TaskSample,
    pert: &Perturbation,
) -> Result<(f64, LsaParams)> {
    let d = params.dim();
    let e = assemble_adversarial(task, pert)?;
    let em = e.matrix();
    let inv_n = 1.0 / e.ctx() as f64;
    let a = params.value_row();
    let b = params.key_query_image(&task.x_q);
    let sb = em * em.tr_mul(&b);
    let sa = em * em.tr_mul(&a);
    let r = a.dot(&sb) * inv_n - task.y_q;
    let mut grad = LsaParams::zeros(d);
    grad.wv_mut()
        .row_mut(d)
        .copy_from(&(sb * (r * inv_n)).transpose());
    grad.wkq_mut()
        .columns_mut(0, d)
        .copy_from(&(sa * (r * inv_n) * task.x_q.transpose()));
    Ok((0.5 * r * r, grad))
}
