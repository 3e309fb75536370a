//! Linear-regression tasks and their prompt embeddings.

use crate::stochastics::{sample_with, CovarianceSpec, RngStream};
use crate::{Error, Matrix, Result, Vector};
use rand_distr::{Distribution, StandardNormal};

/// Slack allowed on the per-column norm constraint.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// One regression task: weight, `N` demonstrations, `M` clean suffix pairs and
/// a query. Labels are exact linear functions of the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub w_tau: Vector,
    /// `d×N` demonstration inputs.
    pub x: Matrix,
    pub y: Vector,
    /// `d×M` clean suffix inputs.
    pub x_sfx: Matrix,
    pub y_sfx: Vector,
    pub x_q: Vector,
    pub y_q: f64,
}

impl TaskSample {
    /// Builds a task from its inputs, computing every label from `w_tau`.
    pub fn from_inputs(w_tau: Vector, x: Matrix, x_sfx: Matrix, x_q: Vector) -> Result<Self> {
        let d = w_tau.len();
        if x.nrows() != d || x_sfx.nrows() != d || x_q.len() != d {
            return Err(Error::DimensionMismatch(
                "task inputs must all have d rows".into(),
            ));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "a task needs N >= 1 demonstrations".into(),
            ));
        }
        let y = x.tr_mul(&w_tau);
        let y_sfx = x_sfx.tr_mul(&w_tau);
        let y_q = w_tau.dot(&x_q);
        Ok(Self {
            w_tau,
            x,
            y,
            x_sfx,
            y_sfx,
            x_q,
            y_q,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_tau.len()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.x_sfx.ncols()
    }
}

/// Draws `w ~ N(0, I)`, then `N` demonstration inputs, `M` suffix inputs and
/// the query, all `N(0, Λ)`, in that order from the stream.
pub fn sample_task(
    stream: &RngStream,
    cov: &CovarianceSpec,
    n: usize,
    m: usize,
) -> Result<TaskSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let d = cov.dim();
    let mut rng = stream.rng();
    let w_tau = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let mut x = Matrix::zeros(d, n);
    for mut col in x.column_iter_mut() {
        col.copy_from(&sample_with(&mut rng, cov));
    }
    let mut x_sfx = Matrix::zeros(d, m);
    for mut col in x_sfx.column_iter_mut() {
        col.copy_from(&sample_with(&mut rng, cov));
    }
    let x_q = sample_with(&mut rng, cov);
    TaskSample::from_inputs(w_tau, x, x_sfx, x_q)
}

/// A `(d+1)×(ctx+1)` prompt whose last column is `(x_q; 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    matrix: Matrix,
    ctx: usize,
}

impl PromptEmbedding {
    pub fn new(matrix: Matrix, ctx: usize) -> Result<Self> {
        if ctx == 0 || matrix.ncols() != ctx + 1 || matrix.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "prompt of shape {:?} cannot hold ctx={ctx} demonstrations plus a query",
                matrix.shape()
            )));
        }
        if matrix[(matrix.nrows() - 1, ctx)] != 0.0 {
            return Err(Error::InvalidArgument(
                "query label slot must be zero".into(),
            ));
        }
        Ok(Self { matrix, ctx })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn ctx(&self) -> usize {
        self.ctx
    }

    pub fn query(&self) -> Vector {
        let d = self.matrix.nrows() - 1;
        self.matrix.column(self.ctx).rows(0, d).into_owned()
    }
}

/// A suffix perturbation `Δ` (`d×M`) with every column inside the ε-ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Matrix,
    eps: f64,
}

impl Perturbation {
    pub fn new(delta: Matrix, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be nonnegative, got {eps}"
            )));
        }
        if let Some((i, n)) = delta
            .column_iter()
            .map(|c| c.norm())
            .enumerate()
            .find(|&(_, n)| !(n <= eps + FEASIBILITY_TOL))
        {
            return Err(Error::InvalidArgument(format!(
                "column {i} has norm {n}, exceeding eps = {eps}"
            )));
        }
        Ok(Self { delta, eps })
    }

    pub fn zeros(d: usize, m: usize, eps: f64) -> Self {
        Self {
            delta: Matrix::zeros(d, m),
            eps,
        }
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn max_column_norm(&self) -> f64 {
        self.delta
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

/// Radially projects every column of `delta` onto the ball of radius `eps`.
pub fn project_perturbation(delta: &Matrix, eps: f64) -> Result<Perturbation> {
    let mut out = delta.clone();
    project_in_place(&mut out, eps);
    Perturbation::new(out, eps)
}

/// Columns already within a few ulps of the sphere are left alone, so that
/// projecting twice is the identity.
pub(crate) fn project_in_place(delta: &mut Matrix, eps: f64) {
    for mut col in delta.column_iter_mut() {
        let n = col.norm();
        if n > eps * (1.0 + 1e-14) {
            if eps == 0.0 {
                col.fill(0.0);
            } else {
                col *= eps / n;
            }
        }
    }
}

/// Columns `(x_i; y_i)` for the demonstrations followed by `(x_q; 0)`.
pub fn assemble_clean(task: &TaskSample) -> PromptEmbedding {
    let (d, n) = (task.dim(), task.n());
    let mut e = Matrix::zeros(d + 1, n + 1);
    e.view_mut((0, 0), (d, n)).copy_from(&task.x);
    e.view_mut((d, 0), (1, n)).copy_from(&task.y.transpose());
    e.view_mut((0, n), (d, 1)).copy_from(&task.x_q);
    PromptEmbedding { matrix: e, ctx: n }
}

/// Demonstrations, then the perturbed suffix `(X_sfx + Δ; Y_sfx)` with clean
/// labels, then the query.
pub fn assemble_adversarial(task: &TaskSample, pert: &Perturbation) -> Result<PromptEmbedding> {
    let (d, n, m) = (task.dim(), task.n(), task.m());
    if pert.delta.shape() != (d, m) {
        return Err(Error::DimensionMismatch(format!(
            "perturbation is {:?}, task suffix is {d}x{m}",
            pert.delta.shape()
        )));
    }
    let mut e = Matrix::zeros(d + 1, n + m + 1);
    e.view_mut((0, 0), (d, n)).copy_from(&task.x);
    e.view_mut((d, 0), (1, n)).copy_from(&task.y.transpose());
    e.view_mut((0, n), (d, m))
        .copy_from(&(&task.x_sfx + &pert.delta));
    e.view_mut((d, n), (1, m))
        .copy_from(&task.y_sfx.transpose());
    e.view_mut((0, n + m), (d, 1)).copy_from(&task.x_q);
    Ok(PromptEmbedding {
        matrix: e,
        ctx: n + m,
    })
}
