//! Experiment configuration, read from JSON with unknown keys rejected.

use crate::{HarnessError, Result};
use advicl::stochastics::make_covariance;
use advicl::trainer::Integrator;
use advicl::{
    default_theta, sigma_threshold, CovKind, CovarianceSpec, InitSpec, Matrix, RegimeConstants,
    RngStream, TrainConfig, TrainMode,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    pub pga_steps: usize,
    /// Defaults to ε/10.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub restarts: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            pga_steps: 100,
            step_size: None,
            restarts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// Defaults to `0.01/λ_max(ΓΛ + ε²ψI)` for the training regime.
    #[serde(default)]
    pub eta: Option<f64>,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub batch_tasks: usize,
    pub diag_every: usize,
    #[serde(default)]
    pub integrator: Integrator,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            eta: None,
            max_steps: 200_000,
            grad_tol: 1e-8,
            batch_tasks: 256,
            diag_every: 100,
            integrator: Integrator::Euler,
        }
    }
}

fn default_sigma_ratio() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub cov: CovKind,
    pub eps: f64,
    pub m_train_list: Vec<usize>,
    pub m_test_list: Vec<usize>,
    pub n_tasks_mc: usize,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default)]
    pub train: TrainSettings,
    /// Initial scale as a fraction of the convergence threshold.
    #[serde(default = "default_sigma_ratio")]
    pub sigma_ratio: f64,
    /// Row-major `d×d` Θ; `d^{-1/4} I` when absent.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// d=4, N=64, ε=2, Λ=I, M_train ∈ {1,2,4,8}, M_test ∈ {1,...,32}, 10⁴ tasks per cell.
    pub fn default_sweep(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            d: 4,
            n: 64,
            cov: CovKind::Identity,
            eps: 2.0,
            m_train_list: vec![1, 2, 4, 8],
            m_test_list: vec![1, 2, 4, 8, 16, 32],
            n_tasks_mc: 10_000,
            attack: AttackSettings::default(),
            train: TrainSettings::default(),
            sigma_ratio: 0.5,
            theta: None,
            seed: 0,
            output_dir: output_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.d == 0 || self.n == 0 {
            return bad("d and N must be positive");
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad("eps must be a nonnegative number");
        }
        if self.m_train_list.is_empty() || self.m_test_list.is_empty() {
            return bad("m_train_list and m_test_list must be nonempty");
        }
        if self.n_tasks_mc < 2 {
            return bad("n_tasks_mc must be at least 2");
        }
        if !(self.sigma_ratio > 0.0 && self.sigma_ratio.is_finite()) {
            return bad("sigma_ratio must be positive");
        }
        if self.attack.restarts == 0 || self.attack.pga_steps == 0 {
            return bad("attack needs restarts >= 1 and pga_steps >= 1");
        }
        if let Some(s) = self.attack.step_size {
            if !(s > 0.0) {
                return bad("attack.step_size must be positive");
            }
        }
        if let Some(t) = &self.theta {
            if t.len() != self.d * self.d {
                return bad("theta must have d*d entries");
            }
        }
        self.covariance()?;
        Ok(())
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        Ok(make_covariance(&self.cov, self.d, 0.0)?)
    }

    pub fn theta(&self) -> Matrix {
        match &self.theta {
            Some(t) => Matrix::from_row_slice(self.d, self.d, t),
            None => default_theta(self.d),
        }
    }

    pub fn regime(&self, m: usize) -> Result<RegimeConstants> {
        Ok(RegimeConstants::new(
            self.n,
            m,
            self.eps,
            &self.covariance()?,
        )?)
    }

    /// `σ = sigma_ratio · threshold(M_train)` with the configured Θ.
    pub fn init_spec(&self, rc: &RegimeConstants) -> InitSpec {
        InitSpec::new(self.sigma_ratio * sigma_threshold(rc), self.theta())
    }

    pub fn train_config(
        &self,
        rc: &RegimeConstants,
        mode: TrainMode,
        stream: RngStream,
    ) -> TrainConfig {
        let mut cfg = TrainConfig::for_regime(rc, mode);
        if let Some(eta) = self.train.eta {
            cfg.eta = eta;
        }
        cfg.max_steps = self.train.max_steps;
        cfg.grad_tol = self.train.grad_tol;
        cfg.batch_tasks = self.train.batch_tasks;
        cfg.diag_every = self.train.diag_every;
        cfg.integrator = self.train.integrator;
        cfg.stream = stream;
        cfg
    }

    pub fn attack_config(&self, m: usize, stream: RngStream) -> advicl::AttackConfig {
        let mut a = advicl::AttackConfig::new(self.eps, m, stream);
        a.pga_steps = self.attack.pga_steps;
        a.restarts = self.attack.restarts;
        if let Some(s) = self.attack.step_size {
            a.step_size = s;
        }
        a
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON serialisation with `output_dir`
    /// cleared, so that where results are written does not change them.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
