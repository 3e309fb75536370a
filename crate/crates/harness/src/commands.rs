//! Implementations behind the CLI subcommands. Each returns a value that can
//! be printed as JSON; files are written under the configured output directory.

use crate::config::ExperimentConfig;
use crate::correlation::{correlation, CorrelationReport};
use crate::sweep::{parse_csv, run_sweep, summarize, write_outputs};
use crate::{HarnessError, Result};
use advicl::theory::robust_bound_dense;
use advicl::{
    closed_form_solution, corollary_terms, estimate_robust_error, nu_mu_constants, robust_bound,
    sigma_threshold, surrogate_min_value, train_minimax_empirical, train_surrogate_full,
    train_surrogate_restricted, CorollaryTerms, LsaParams, Matrix, RngStream, TrainMode,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub cells: usize,
    pub failed_cells: usize,
    pub flagged_cells: usize,
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let records = run_sweep(cfg)?;
    let failed_cells = records.iter().filter(|r| r.failed()).count();
    let flagged_cells = records.iter().filter(|r| !r.flag.is_empty()).count();
    let cells = records.len();
    let summary = summarize(cfg, records);
    let (csv, summary) = write_outputs(&cfg.output_dir, &summary)?;
    Ok(SweepOutcome {
        csv,
        summary,
        cells,
        failed_cells,
        flagged_cells,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub mode: TrainMode,
    pub m_train: usize,
    pub steps: usize,
    pub converged: bool,
    pub final_loss: Option<f64>,
    /// Relative Frobenius gap of `w22·W11` to the closed-form product.
    pub rel_err_to_closed_form: f64,
    pub checkpoint: PathBuf,
    pub trajectory: PathBuf,
}

fn mode_tag(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::RestrictedAnalytic => "restricted",
        TrainMode::FullMc => "full",
        TrainMode::MinimaxEmpirical => "minimax",
    }
}

/// Trains on the first entry of `m_train_list`.
pub fn train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m_train = cfg.m_train_list[0];
    let rc = cfg.regime(m_train)?;
    let init = cfg.init_spec(&rc);
    let tcfg = cfg.train_config(
        &rc,
        mode,
        RngStream::new(cfg.seed, 0x7A_0000 + m_train as u64),
    );
    let (params, diag) = match mode {
        TrainMode::RestrictedAnalytic => {
            let (r, diag) = train_surrogate_restricted(&init, &rc, &tcfg)?;
            (r.embed(), diag)
        }
        TrainMode::FullMc => train_surrogate_full(&init, &rc, &tcfg)?,
        TrainMode::MinimaxEmpirical => {
            train_minimax_empirical(&init, &cfg.covariance()?, cfg.n, m_train, cfg.eps, &tcfg)?
        }
    };
    let sol = closed_form_solution(&rc)?;
    let rel = (params.restricted().product() - &sol.product).norm() / sol.product.norm();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let tag = mode_tag(mode);
    let checkpoint = cfg.output_dir.join(format!("checkpoint_{tag}.json"));
    let trajectory = cfg.output_dir.join(format!("trajectory_{tag}.csv"));
    std::fs::write(&checkpoint, params.to_json()?)?;
    std::fs::write(&trajectory, diag.to_csv())?;
    Ok(TrainOutcome {
        mode,
        m_train,
        steps: diag.steps,
        converged: diag.converged,
        final_loss: diag.last().map(|r| r.loss),
        rel_err_to_closed_form: rel,
        checkpoint,
        trajectory,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackEvalRow {
    pub m_test: usize,
    pub robust_err: f64,
    pub robust_err_se: f64,
    pub used_exact_attack: bool,
}

/// Robust error of a saved model at every configured test length.
pub fn attack_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<AttackEvalRow>> {
    cfg.validate()?;
    let params = LsaParams::from_json(&std::fs::read_to_string(checkpoint)?)?;
    if params.dim() != cfg.d {
        return Err(HarnessError::Config(format!(
            "checkpoint has d = {}, config has d = {}",
            params.dim(),
            cfg.d
        )));
    }
    let cov = cfg.covariance()?;
    cfg.m_test_list
        .iter()
        .map(|&m| {
            let attack = cfg.attack_config(m, RngStream::new(cfg.seed, 0xE7_0000 + m as u64));
            let est = estimate_robust_error(&params, &cov, cfg.n, &attack, cfg.n_tasks_mc)?;
            Ok(AttackEvalRow {
                m_test: m,
                robust_err: est.mean,
                robust_err_se: est.stderr,
                used_exact_attack: est.exact,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub m_test: usize,
    pub bound: f64,
    /// Same bound evaluated with dense matrix algebra.
    pub bound_dense: f64,
    pub corollary_terms: Option<CorollaryTerms>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryRow {
    pub m_train: usize,
    pub gamma: Vec<Vec<f64>>,
    pub psi: f64,
    pub operator: Vec<Vec<f64>>,
    pub product: Vec<Vec<f64>>,
    pub w22: f64,
    pub w11: Vec<Vec<f64>>,
    pub surrogate_min: f64,
    pub sigma_threshold: f64,
    pub sigma: f64,
    pub nu: f64,
    pub mu: f64,
    pub constants_valid: bool,
    pub bounds: Vec<BoundRow>,
}

pub fn theory(cfg: &ExperimentConfig) -> Result<Vec<TheoryRow>> {
    cfg.validate()?;
    cfg.m_train_list
        .iter()
        .map(|&m_train| {
            let rc = cfg.regime(m_train)?;
            let sol = closed_form_solution(&rc)?;
            let init = cfg.init_spec(&rc);
            let nm = nu_mu_constants(&init, &rc);
            let bounds = cfg
                .m_test_list
                .iter()
                .map(|&m_test| {
                    let te = cfg.regime(m_test)?;
                    Ok(BoundRow {
                        m_test,
                        bound: robust_bound(&rc, &te)?,
                        bound_dense: robust_bound_dense(&rc, &te)?,
                        corollary_terms: corollary_terms(&rc, &te).ok(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TheoryRow {
                m_train,
                gamma: rows(&rc.gamma),
                psi: rc.psi,
                operator: rows(rc.operator()),
                product: rows(&sol.product),
                w22: sol.w22,
                w11: rows(&sol.w11),
                surrogate_min: surrogate_min_value(&rc),
                sigma_threshold: sigma_threshold(&rc),
                sigma: init.sigma,
                nu: nm.nu,
                mu: nm.mu,
                constants_valid: nm.valid,
                bounds,
            })
        })
        .collect()
}

pub fn correlate_csv(path: &Path, seed: u64) -> Result<CorrelationReport> {
    let records = parse_csv(&std::fs::read_to_string(path)?)?;
    correlation(&records, seed)
}
