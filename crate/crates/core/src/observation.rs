//! Degradation operators, noisy observations and likelihood gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{pinv, randn};

#[derive(Debug, Clone, PartialEq)]
pub enum LinearKind {
    Dense,
    Mask { keep: Vec<usize> },
    Downsample { factor: usize },
    RandomProjection,
}

/// A linear operator `R^n -> R^m`, stored densely together with its pseudoinverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    kind: LinearKind,
    matrix: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl LinearOperator {
    fn build(kind: LinearKind, matrix: DMatrix<f64>) -> Self {
        let pinv = pinv(&matrix);
        Self { kind, matrix, pinv }
    }

    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dense operator must be finite and non-empty".into()));
        }
        Ok(Self::build(LinearKind::Dense, matrix))
    }

    pub fn identity(n: usize) -> Self {
        Self::build(LinearKind::Dense, DMatrix::identity(n, n))
    }

    /// Keeps the listed coordinates (in the given order).
    pub fn mask(n: usize, keep: Vec<usize>) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|k| *k >= n) {
            return Err(Error::InvalidParameter(format!("mask {keep:?} invalid for dimension {n}")));
        }
        let mut m = DMatrix::zeros(keep.len(), n);
        for (row, k) in keep.iter().enumerate() {
            m[(row, *k)] = 1.0;
        }
        Ok(Self::build(LinearKind::Mask { keep }, m))
    }

    /// Averages consecutive blocks of `factor` coordinates.
    pub fn downsample(n: usize, factor: usize) -> Result<Self> {
        if factor == 0 || n % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "downsample factor {factor} must divide dimension {n}"
            )));
        }
        let m = n / factor;
        let mut a = DMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..factor {
                a[(i, i * factor + j)] = 1.0 / factor as f64;
            }
        }
        Ok(Self::build(LinearKind::Downsample { factor }, a))
    }

    /// Rows drawn i.i.d. from `N(0, I/m)`.
    pub fn random_projection<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidParameter("random projection needs m, n >= 1".into()));
        }
        let entries = randn(rng, m * n) / (m as f64).sqrt();
        Ok(Self::build(
            LinearKind::RandomProjection,
            DMatrix::from_column_slice(m, n, entries.as_slice()),
        ))
    }

    pub fn kind(&self) -> &LinearKind {
        &self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    pub fn adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(u)
    }

    pub fn pinv_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.pinv * y
    }
}

/// Elementwise `clamp(2 x, -c, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOperator {
    pub dim: usize,
    pub threshold: f64,
}

impl ClipOperator {
    pub fn new(dim: usize, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) || dim == 0 {
            return Err(Error::InvalidParameter(format!("clip threshold {threshold} must be > 0")));
        }
        Ok(Self { dim, threshold })
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| (2.0 * v).clamp(-self.threshold, self.threshold))
    }

    /// Diagonal of the a.e. Jacobian: 2 inside the linear range, 0 when saturated.
    pub fn jacobian_diag(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| if (2.0 * v).abs() < self.threshold { 2.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Linear(LinearOperator),
    Clip(ClipOperator),
}

impl Operator {
    pub fn in_dim(&self) -> usize {
        match self {
            Operator::Linear(a) => a.in_dim(),
            Operator::Clip(c) => c.dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Linear(a) => a.out_dim(),
            Operator::Clip(c) => c.dim,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Operator::Linear(a) => a.apply(x),
            Operator::Clip(c) => c.apply(x),
        }
    }

    /// `J(x)^T u` with `J` the (a.e.) Jacobian at `x`.
    pub fn vjp(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Operator::Linear(a) => a.adjoint(u),
            Operator::Clip(c) => c.jacobian_diag(x).component_mul(u),
        }
    }

    pub fn as_linear(&self) -> Option<&LinearOperator> {
        match self {
            Operator::Linear(a) => Some(a),
            Operator::Clip(_) => None,
        }
    }
}

impl From<LinearOperator> for Operator {
    fn from(a: LinearOperator) -> Self {
        Operator::Linear(a)
    }
}

impl From<ClipOperator> for Operator {
    fn from(c: ClipOperator) -> Self {
        Operator::Clip(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodForm {
    /// `-||y - A(x)||^2`
    #[default]
    Squared,
    /// `-||y - A(x)||`
    L2Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: DVector<f64>,
    pub operator: Operator,
    pub sigma_y: f64,
    pub form: LikelihoodForm,
}

impl Observation {
    pub fn new(y: DVector<f64>, operator: Operator, sigma_y: f64, form: LikelihoodForm) -> Result<Self> {
        if y.len() != operator.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: operator.out_dim(),
                got: y.len(),
            });
        }
        if !(sigma_y >= 0.0) || !sigma_y.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_y = {sigma_y} must be >= 0")));
        }
        Ok(Self { y, operator, sigma_y, form })
    }

    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.operator.clone(), self.sigma_y, self.form)
    }

    pub fn dim(&self) -> usize {
        self.operator.in_dim()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.y - self.operator.apply(x)
    }

    /// Gaussian negative log-likelihood `||y - A(x)||^2 / (2 sigma_y^2)` (no constant).
    pub fn neg_log_lik(&self, x: &DVector<f64>) -> Result<f64> {
        if self.sigma_y <= 0.0 {
            return Err(Error::InvalidParameter("likelihood density needs sigma_y > 0".into()));
        }
        Ok(self.residual(x).norm_squared() / (2.0 * self.sigma_y * self.sigma_y))
    }

    /// `A^T A / sigma_y^2`, the Hessian of the negative log-likelihood.
    pub fn likelihood_curvature(&self) -> Result<DMatrix<f64>> {
        let a = self
            .operator
            .as_linear()
            .ok_or_else(|| Error::UnsupportedOperator("likelihood curvature needs a linear operator".into()))?;
        if self.sigma_y <= 0.0 {
            return Err(Error::InvalidParameter("likelihood curvature needs sigma_y > 0".into()));
        }
        Ok(a.matrix().tr_mul(a.matrix()) / (self.sigma_y * self.sigma_y))
    }
}

/// `y = A(x) + sigma_y n` with `n ~ N(0, I)`, squared likelihood form.
pub fn observe<R: Rng + ?Sized>(op: &Operator, sigma_y: f64, x: &DVector<f64>, rng: &mut R) -> Result<Observation> {
    if x.len() != op.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: op.in_dim(),
            got: x.len(),
        });
    }
    if !(sigma_y >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_y = {sigma_y} must be >= 0")));
    }
    let mut y = op.apply(x);
    if sigma_y > 0.0 {
        y += randn(rng, y.len()) * sigma_y;
    }
    Observation::new(y, op.clone(), sigma_y, LikelihoodForm::Squared)
}

/// Gradient of the unnormalized log-likelihood: `2 J^T r` (squared) or
/// `J^T r / ||r||` (norm form, zero when `||r|| < 1e-12`), with `r = y - A(x)`.
pub fn loglik_grad(obs: &Observation, x: &DVector<f64>) -> DVector<f64> {
    let r = obs.residual(x);
    match obs.form {
        LikelihoodForm::Squared => obs.operator.vjp(x, &r) * 2.0,
        LikelihoodForm::L2Norm => {
            let norm = r.norm();
            if norm < 1e-12 {
                DVector::zeros(x.len())
            } else {
                obs.operator.vjp(x, &r) / norm
            }
        }
    }
}

/// Pseudoinverse initialization `A^+ y`; `y / 2` for the clip operator.
pub fn pinv_init(obs: &Observation) -> DVector<f64> {
    match &obs.operator {
        Operator::Linear(a) => a.pinv_apply(&obs.y),
        Operator::Clip(_) => &obs.y / 2.0,
    }
}

/// Anything that supplies the data term of Stage 1: a likelihood gradient and
/// an initial point, in the coordinates being optimized.
pub trait Likelihood {
    fn dim(&self) -> usize;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn init(&self) -> DVector<f64>;
    /// The data term whose gradient is `grad`.
    fn log_lik(&self, x: &DVector<f64>) -> f64;
}

impl Likelihood for Observation {
    fn dim(&self) -> usize {
        Observation::dim(self)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        loglik_grad(self, x)
    }

    fn init(&self) -> DVector<f64> {
        pinv_init(self)
    }

    fn log_lik(&self, x: &DVector<f64>) -> f64 {
        let r = self.residual(x);
        match self.form {
            LikelihoodForm::Squared => -r.norm_squared(),
            LikelihoodForm::L2Norm => -r.norm(),
        }
    }
}
