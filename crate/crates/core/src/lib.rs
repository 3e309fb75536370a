//! Adversarial in-context learning of single-layer linear self-attention (LSA)
//! models on Gaussian linear-regression tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`stochastics`]: deterministic RNG streams and Gaussian sampling.
//! - [`model`]: the LSA parameter container and its prediction rule.
//! - [`task`]: task sampling and prompt-embedding assembly, including the
//!   adversarial suffix.
//! - [`attack`]: inner maximisation over suffix perturbations and the Monte
//!   Carlo robust-error estimator.
//! - [`surrogate`]: the four-term surrogate adversarial-training loss, its
//!   simplified closed form on the restricted class, and the regime constants.
//! - [`theory`]: closed-form optimum, robust generalisation bound and the
//!   order terms of that bound.
//! - [`trainer`]: discretised gradient flow (analytic and Monte Carlo) and an
//!   empirical minimax trainer, with per-trajectory diagnostics.

// Validation uses negated comparisons on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod error;
pub(crate) mod linalg;
pub mod model;
pub mod stochastics;
pub mod surrogate;
pub mod task;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};

pub use attack::{
    attack_exact_affine, attack_pga, estimate_robust_error, AttackConfig, AttackOutcome,
    RobustErrorEstimate,
};
pub use model::{default_theta, init_params, predict, InitSpec, LsaParams, RestrictedParams};
pub use stochastics::{sample_gaussian_vector, CovKind, CovarianceSpec, RngStream};
pub use surrogate::{
    gamma_psi, general_surrogate_mc, nu_mu_constants, sigma_threshold, simplified_gradient,
    simplified_loss, NuMu, RegimeConstants, SurrogateTerms,
};
pub use task::{
    assemble_adversarial, assemble_clean, project_perturbation, sample_task, Perturbation,
    PromptEmbedding, TaskSample,
};
pub use theory::{
    closed_form_solution, corollary_terms, robust_bound, surrogate_min_value, ClosedFormSolution,
    CorollaryTerms,
};
pub use trainer::{
    check_pl_along_trajectory, train_minimax_empirical, train_surrogate_full,
    train_surrogate_restricted, DiagnosticRecord, Integrator, PlReport, TrainConfig, TrainMode,
    TrajectoryDiagnostics,
};

/// Dense matrix type used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector type used throughout.
pub type Vector = nalgebra::DVector<f64>;
