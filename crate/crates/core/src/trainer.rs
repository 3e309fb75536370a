//! Discretised gradient flow on the surrogate loss, an empirical minimax
//! trainer, and per-checkpoint diagnostics.

use crate::attack::{attack_exact_affine, attack_pga, attacked_loss_gradient, AttackConfig};
use crate::model::{init_params, InitSpec, LsaParams, RestrictedParams};
use crate::stochastics::{mean_stderr, CovarianceSpec, RngStream};
use crate::surrogate::{
    general_surrogate_gradient_mc, nu_mu_constants, sigma_threshold, simplified_gradient,
    simplified_loss, RegimeConstants,
};
use crate::task::sample_task;
use crate::theory::{surrogate_excess, surrogate_min_value};
use crate::{Error, Matrix, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Consecutive rising checkpoints that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 10;

/// Off-block norm under which the minimax trainer treats `w^V_21` as zero.
pub const AFFINE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    RestrictedAnalytic,
    FullMc,
    MinimaxEmpirical,
}

/// Time discretisation of the restricted gradient flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Explicit Euler: one gradient evaluation per step.
    #[default]
    Euler,
    /// Classical fourth-order Runge-Kutta on the same flow.
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub mode: TrainMode,
    pub batch_tasks: usize,
    pub diag_every: usize,
    /// Source of task batches in the Monte Carlo modes.
    pub stream: RngStream,
    /// Restricted mode only; the Monte Carlo modes always take plain steps.
    #[serde(default)]
    pub integrator: Integrator,
}

impl TrainConfig {
    /// `η = 0.01/λ_max(ΓΛ + ε²ψI)`, `grad_tol = 1e-8`, `max_steps = 2·10⁵`.
    pub fn for_regime(rc: &RegimeConstants, mode: TrainMode) -> Self {
        Self {
            eta: 0.01 / rc.operator_max_eigen(),
            max_steps: 200_000,
            grad_tol: 1e-8,
            mode,
            batch_tasks: 256,
            diag_every: 100,
            stream: RngStream::new(0, 0),
            integrator: Integrator::Euler,
        }
    }

    fn validate(&self, mode: TrainMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::InvalidArgument(format!(
                "trainer for {mode:?} called with mode {:?}",
                self.mode
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "eta and grad_tol must be positive".into(),
            ));
        }
        if self.max_steps == 0 || self.diag_every == 0 || self.batch_tasks == 0 {
            return Err(Error::InvalidArgument(
                "max_steps, diag_every and batch_tasks must be positive".into(),
            ));
        }
        if mode != TrainMode::RestrictedAnalytic && self.batch_tasks < 2 {
            return Err(Error::InvalidArgument(
                "Monte Carlo modes need batch_tasks >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// One checkpoint of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub w22: f64,
    pub frob_w11: f64,
    pub balance_gap: f64,
    /// `‖∇‖² − μ(loss − loss_min)`; restricted mode only.
    pub pl_slack: Option<f64>,
    /// Completed-square `loss − loss_min`; restricted mode only.
    pub excess: Option<f64>,
    pub off_v21: Option<f64>,
    pub off_kq21: Option<f64>,
    /// `3·√(Σ se²)` over the off-block gradient entries at this step.
    pub grad_noise_floor: Option<f64>,
    /// `3·η·√(Σ_t Σ se²)`: accumulated parameter noise floor for the off-blocks.
    pub param_noise_floor: Option<f64>,
    pub off_grad_norm: Option<f64>,
    pub loss_stderr: Option<f64>,
}

impl DiagnosticRecord {
    fn basic(step: usize, loss: f64, grad_norm_sq: f64, w22: f64, frob_w11: f64) -> Self {
        Self {
            step,
            loss,
            grad_norm_sq,
            w22,
            frob_w11,
            balance_gap: (w22 * w22 - frob_w11 * frob_w11).abs(),
            pl_slack: None,
            excess: None,
            off_v21: None,
            off_kq21: None,
            grad_noise_floor: None,
            param_noise_floor: None,
            off_grad_norm: None,
            loss_stderr: None,
        }
    }
}

/// Checkpoint records of one run plus run-level facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub mode: TrainMode,
    pub records: Vec<DiagnosticRecord>,
    pub steps: usize,
    pub converged: bool,
    /// σ was below the convergence threshold at initialisation.
    pub conditions_met: bool,
    pub nu: Option<f64>,
    pub mu: Option<f64>,
    pub loss_min: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrajectoryDiagnostics {
    pub const CSV_HEADER: &'static str =
        "step,loss,grad_norm_sq,w22,frob_w11,balance_gap,pl_slack,off_v21,off_kq21";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                r.grad_norm_sq,
                r.w22,
                r.frob_w11,
                r.balance_gap,
                opt(r.pl_slack),
                opt(r.off_v21),
                opt(r.off_kq21)
            );
        }
        out
    }

    pub fn last(&self) -> Option<&DiagnosticRecord> {
        self.records.last()
    }
}

/// Tracks rising checkpoints.
struct DivergenceGuard {
    initial: f64,
    prev: f64,
    rising: usize,
}

impl DivergenceGuard {
    fn new(initial: f64) -> Self {
        Self {
            initial,
            prev: initial,
            rising: 0,
        }
    }

    /// Divergence is a non-finite loss, or `DIVERGENCE_WINDOW` consecutive
    /// rising checkpoints ending above the initial loss. Monte Carlo losses
    /// wander up and down near a minimum, so a rise alone is not enough.
    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if loss > self.prev {
            self.rising += 1;
        } else {
            self.rising = 0;
        }
        self.prev = loss;
        if self.rising >= DIVERGENCE_WINDOW && loss > self.initial {
            return Err(Error::Diverged { step, loss });
        }
        Ok(())
    }
}

fn grad_norm_sq(g: &(f64, Matrix)) -> f64 {
    g.0 * g.0 + g.1.norm_squared()
}

fn step_restricted(r: &RestrictedParams, g: &(f64, Matrix), eta: f64) -> RestrictedParams {
    RestrictedParams::new(r.w22 - eta * g.0, &r.w11 - &g.1 * eta)
}

fn rk4_step(
    r: &RestrictedParams,
    g1: &(f64, Matrix),
    rc: &RegimeConstants,
    eta: f64,
) -> RestrictedParams {
    let g2 = simplified_gradient(&step_restricted(r, g1, eta / 2.0), rc);
    let g3 = simplified_gradient(&step_restricted(r, &g2, eta / 2.0), rc);
    let g4 = simplified_gradient(&step_restricted(r, &g3, eta), rc);
    let avg = (
        (g1.0 + 2.0 * g2.0 + 2.0 * g3.0 + g4.0) / 6.0,
        (&g1.1 + &g2.1 * 2.0 + &g3.1 * 2.0 + &g4.1) / 6.0,
    );
    step_restricted(r, &avg, eta)
}

/// One trial step along the negative gradient. Rejects `η` when the loss
/// rises or the curvature seen along the step gives `η·κ ≥ 1`.
fn probe_step(r: &RestrictedParams, rc: &RegimeConstants, eta: f64) -> Result<()> {
    let before = simplified_loss(r, rc);
    let g = simplified_gradient(r, rc);
    let gn = grad_norm_sq(&g);
    if gn == 0.0 {
        return Ok(());
    }
    let after = simplified_loss(&step_restricted(r, &g, eta), rc);
    let kappa = 2.0 * (after - before + eta * gn) / (eta * eta * gn);
    if !after.is_finite() || after > before || eta * kappa >= 1.0 {
        return Err(Error::StepSizeTooLarge { eta, before, after });
    }
    Ok(())
}

/// Discretised gradient flow (explicit Euler unless `cfg.integrator` says
/// otherwise) on the simplified surrogate loss from the initialisation `init`, stopping when `‖∇‖ < grad_tol` or after
/// `max_steps`. A checkpoint is recorded every `diag_every` steps and at the
/// final step.
pub fn train_surrogate_restricted(
    init: &InitSpec,
    rc: &RegimeConstants,
    cfg: &TrainConfig,
) -> Result<(RestrictedParams, TrajectoryDiagnostics)> {
    cfg.validate(TrainMode::RestrictedAnalytic)?;
    init.validate(&rc.cov)?;
    let conditions_met = init.sigma < sigma_threshold(rc);
    let nm = nu_mu_constants(init, rc);
    let loss_min = surrogate_min_value(rc);
    let mut r = init.restricted();
    probe_step(&r, rc, cfg.eta)?;

    let record = |step: usize, r: &RestrictedParams, loss: f64, gn: f64| {
        let mut rec = DiagnosticRecord::basic(step, loss, gn, r.w22, r.w11.norm());
        let excess = surrogate_excess(r, rc);
        rec.excess = Some(excess);
        rec.pl_slack = Some(gn - nm.mu * (loss - loss_min));
        rec
    };

    let tol_sq = cfg.grad_tol * cfg.grad_tol;
    let mut records = Vec::new();
    let mut guard = DivergenceGuard::new(simplified_loss(&r, rc));
    let mut converged = false;
    let mut step = 0;
    loop {
        let loss = simplified_loss(&r, rc);
        let g = simplified_gradient(&r, rc);
        let gn = grad_norm_sq(&g);
        let done = gn < tol_sq;
        if step % cfg.diag_every == 0 || done || step == cfg.max_steps {
            records.push(record(step, &r, loss, gn));
            guard.check(step, loss)?;
        }
        if done {
            converged = true;
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        r = match cfg.integrator {
            Integrator::Euler => step_restricted(&r, &g, cfg.eta),
            Integrator::Rk4 => rk4_step(&r, &g, rc, cfg.eta),
        };
        step += 1;
    }
    Ok((
        r,
        TrajectoryDiagnostics {
            mode: TrainMode::RestrictedAnalytic,
            records,
            steps: step,
            converged,
            conditions_met,
            nu: Some(nm.nu),
            mu: Some(nm.mu),
            loss_min: Some(loss_min),
        },
    ))
}

fn off_block_floor(se: &LsaParams) -> f64 {
    se.v21().norm_squared() + se.kq21().norm_squared()
}

/// Stochastic gradient descent on the full-parameter surrogate with a fresh
/// batch of `batch_tasks` tasks per step (batch `t` comes from substream `t`
/// of `cfg.stream`). Runs exactly `max_steps` steps.
pub fn train_surrogate_full(
    init: &InitSpec,
    rc: &RegimeConstants,
    cfg: &TrainConfig,
) -> Result<(LsaParams, TrajectoryDiagnostics)> {
    cfg.validate(TrainMode::FullMc)?;
    init.validate(&rc.cov)?;
    let conditions_met = init.sigma < sigma_threshold(rc);
    let mut params = init_params(init, rc.dim())?;
    let mut records = Vec::new();
    let mut guard: Option<DivergenceGuard> = None;
    let mut acc_se_sq = 0.0f64;
    for step in 0..=cfg.max_steps {
        let g = general_surrogate_gradient_mc(
            &params,
            rc,
            cfg.batch_tasks,
            &cfg.stream.substream(step as u64),
        )?;
        let loss = g.terms.total();
        let gn = g.grad.wv().norm_squared() + g.grad.wkq().norm_squared();
        let floor_sq = off_block_floor(&g.stderr);
        let guard = guard.get_or_insert_with(|| DivergenceGuard::new(loss));
        if step % cfg.diag_every == 0 || step == cfg.max_steps {
            let mut rec =
                DiagnosticRecord::basic(step, loss, gn, params.v22(), params.kq11().norm());
            rec.off_v21 = Some(params.v21().norm());
            rec.off_kq21 = Some(params.kq21().norm());
            rec.grad_noise_floor = Some(3.0 * floor_sq.sqrt());
            rec.param_noise_floor = Some(3.0 * cfg.eta * acc_se_sq.sqrt());
            rec.off_grad_norm =
                Some((g.grad.v21().norm_squared() + g.grad.kq21().norm_squared()).sqrt());
            rec.loss_stderr = Some(g.terms.stderr);
            records.push(rec);
            guard.check(step, loss)?;
        }
        if step == cfg.max_steps {
            break;
        }
        *params.wv_mut() -= g.grad.wv() * cfg.eta;
        *params.wkq_mut() -= g.grad.wkq() * cfg.eta;
        acc_se_sq += floor_sq;
    }
    Ok((
        params,
        TrajectoryDiagnostics {
            mode: TrainMode::FullMc,
            records,
            steps: cfg.max_steps,
            converged: false,
            conditions_met,
            nu: None,
            mu: None,
            loss_min: None,
        },
    ))
}

/// Empirical adversarial training: each step attacks a fresh batch (exactly
/// while `‖w^V_21‖ ≤ 1e-12`, by projected gradient ascent otherwise), then
/// descends the batch-mean attacked loss with the perturbations held fixed.
pub fn train_minimax_empirical(
    init: &InitSpec,
    cov: &CovarianceSpec,
    n: usize,
    m_train: usize,
    eps: f64,
    cfg: &TrainConfig,
) -> Result<(LsaParams, TrajectoryDiagnostics)> {
    cfg.validate(TrainMode::MinimaxEmpirical)?;
    init.validate(cov)?;
    let rc = RegimeConstants::new(n, m_train, eps, cov)?;
    let conditions_met = init.sigma < sigma_threshold(&rc);
    let d = cov.dim();
    let mut params = init_params(init, d)?;
    let mut records = Vec::new();
    let mut guard: Option<DivergenceGuard> = None;
    for step in 0..=cfg.max_steps {
        let batch = cfg.stream.substream(step as u64);
        let affine = params.v21().norm() <= AFFINE_TOL;
        let mut attack_params = params.clone();
        if affine {
            attack_params.v21_mut().fill(0.0);
        }
        let per_task: Vec<(f64, LsaParams)> = (0..cfg.batch_tasks as u64)
            .into_par_iter()
            .map(|t| -> Result<(f64, LsaParams)> {
                let task = sample_task(&batch.substream(2 * t), cov, n, m_train)?;
                let out = if affine {
                    attack_exact_affine(&attack_params, &task, eps)?
                } else {
                    let acfg = AttackConfig::new(eps, m_train, batch.substream(2 * t + 1));
                    attack_pga(&params, &task, &acfg)?
                };
                attacked_loss_gradient(&params, &task, &out.delta)
            })
            .collect::<Result<_>>()?;
        let losses: Vec<f64> = per_task.iter().map(|p| p.0).collect();
        let (loss, loss_se) = mean_stderr(&losses);
        let mut grad = LsaParams::zeros(d);
        for (_, g) in &per_task {
            *grad.wv_mut() += g.wv();
            *grad.wkq_mut() += g.wkq();
        }
        let inv = 1.0 / cfg.batch_tasks as f64;
        *grad.wv_mut() *= inv;
        *grad.wkq_mut() *= inv;
        let gn = grad.wv().norm_squared() + grad.wkq().norm_squared();
        let guard = guard.get_or_insert_with(|| DivergenceGuard::new(loss));
        if step % cfg.diag_every == 0 || step == cfg.max_steps {
            let mut rec =
                DiagnosticRecord::basic(step, loss, gn, params.v22(), params.kq11().norm());
            rec.off_v21 = Some(params.v21().norm());
            rec.off_kq21 = Some(params.kq21().norm());
            rec.loss_stderr = Some(loss_se);
            records.push(rec);
            guard.check(step, loss)?;
        }
        if step == cfg.max_steps {
            break;
        }
        *params.wv_mut() -= grad.wv() * cfg.eta;
        *params.wkq_mut() -= grad.wkq() * cfg.eta;
    }
    Ok((
        params,
        TrajectoryDiagnostics {
            mode: TrainMode::MinimaxEmpirical,
            records,
            steps: cfg.max_steps,
            converged: false,
            conditions_met,
            nu: None,
            mu: None,
            loss_min: None,
        },
    ))
}

/// Outcome of checking `‖∇‖² ≥ μ(loss − loss_min)` at every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlReport {
    /// Smallest `‖∇‖² − μ(loss − loss_min)` over the run.
    pub worst_slack: f64,
    pub worst_step: usize,
    pub checked: usize,
    pub holds: bool,
}

pub fn check_pl_along_trajectory(diag: &TrajectoryDiagnostics, mu: f64, loss_min: f64) -> PlReport {
    let mut worst = (f64::INFINITY, 0);
    for r in &diag.records {
        let slack = r.grad_norm_sq - mu * (r.loss - loss_min);
        if slack < worst.0 {
            worst = (slack, r.step);
        }
    }
    PlReport {
        worst_slack: worst.0,
        worst_step: worst.1,
        checked: diag.records.len(),
        holds: worst.0 >= -1e-9,
    }
}
