use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_spd, log_sum_exp, randn, sym_eigen};
use crate::schedule::Schedule;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// One Gaussian component, kept in its covariance eigenbasis so that the
/// VP-diffused covariance `abar * cov + (1 - abar) I` is diagonal in the
/// same basis for every time.
#[derive(Debug, Clone, PartialEq)]
struct Component {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl Component {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_spd(&cov, "mixture covariance")?;
        let eig = sym_eigen(&cov);
        Ok(Self {
            mean,
            cov,
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
        })
    }

    fn variances_at(&self, abar: f64) -> DVector<f64> {
        self.eigenvalues.map(|d| abar * d + (1.0 - abar))
    }
}

/// Finite Gaussian mixture `sum_k w_k N(m_k, S_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Component>,
}

/// Per-point evaluation of a (diffused) mixture.
struct Eval {
    log_pdf: f64,
    resp: Vec<f64>,
    grads: Vec<DVector<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidParameter(format!(
                "mixture needs matching nonempty weights/means/covs, got {}/{}/{}",
                weights.len(),
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be positive".into()));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (m, c) in means.into_iter().zip(covs) {
            if m.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.len() });
            }
            if c.nrows() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.nrows() });
            }
            components.push(Component::new(m, c)?);
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    /// Like [`GaussianMixture::new`] but rescales the weights to sum to one.
    pub fn normalized(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidParameter("mixture weights have no mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), means, covs)
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(0, I_n)`.
    pub fn standard(dim: usize) -> Self {
        Self::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is SPD")
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn component_cov(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].cov
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covs(&self) -> Vec<DMatrix<f64>> {
        self.components.iter().map(|c| c.cov.clone()).collect()
    }

    pub fn is_gaussian(&self) -> bool {
        self.weights.iter().filter(|w| **w > 0.0).count() == 1
    }

    /// Mixture mean.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += &c.mean * *w;
        }
        m
    }

    /// Mixture covariance (law of total variance).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let n = self.dim();
        let mut cov = DMatrix::zeros(n, n);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let d = &c.mean - &mean;
            cov += (&c.cov + &d * d.transpose()) * *w;
        }
        cov
    }

    /// Law of `sqrt(abar) X + sqrt(1 - abar) E` for `X` from this mixture.
    pub fn diffuse_with(&self, abar: f64) -> GaussianMixture {
        let n = self.dim();
        let eye = DMatrix::<f64>::identity(n, n);
        let components = self
            .components
            .iter()
            .map(|c| {
                let cov = &c.cov * abar + &eye * (1.0 - abar);
                Component {
                    mean: &c.mean * abar.sqrt(),
                    cov,
                    basis: c.basis.clone(),
                    eigenvalues: c.variances_at(abar),
                }
            })
            .collect();
        GaussianMixture {
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            components,
        }
    }

    /// Exact marginal of the VP forward process at time `t`.
    pub fn diffuse(&self, schedule: &Schedule, t: f64) -> Result<GaussianMixture> {
        Ok(self.diffuse_with(schedule.alpha_bar_at(t)?))
    }

    fn eval(&self, abar: f64, x: &DVector<f64>) -> Eval {
        let n = self.dim() as f64;
        let sa = abar.sqrt();
        let k = self.components.len();
        let mut logs = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            let vars = c.variances_at(abar);
            let diff = x - &c.mean * sa;
            let u = c.basis.tr_mul(&diff);
            let scaled = u.component_div(&vars);
            let quad = u.dot(&scaled);
            let logdet: f64 = vars.iter().map(|v| v.ln()).sum();
            logs.push(lw - 0.5 * (quad + logdet + n * LOG_2PI));
            grads.push(-(&c.basis * scaled));
        }
        let log_pdf = log_sum_exp(&logs);
        let resp = logs
            .iter()
            .map(|l| if log_pdf.is_finite() { (l - log_pdf).exp() } else { 0.0 })
            .collect();
        Eval { log_pdf, resp, grads }
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.eval(1.0, x).log_pdf
    }

    /// `log p_t(x)` of the diffused mixture at noise level `abar`.
    pub fn log_pdf_at(&self, abar: f64, x: &DVector<f64>) -> f64 {
        self.eval(abar, x).log_pdf
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        self.score_at(1.0, x)
    }

    /// Gradient of `log p_t` at `x` for the mixture diffused to `abar`.
    pub fn score_at(&self, abar: f64, x: &DVector<f64>) -> DVector<f64> {
        let e = self.eval(abar, x);
        let mut g = DVector::zeros(self.dim());
        for (r, gk) in e.resp.iter().zip(&e.grads) {
            if *r > 0.0 {
                g.axpy(*r, gk, 1.0);
            }
        }
        g
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.eval(1.0, x).resp
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.hessian_at(1.0, x)
    }

    /// Hessian of `log p_t`:
    /// `sum_k r_k (-P_k + g_k g_k^T) - g g^T` with `g = sum_k r_k g_k`.
    pub fn hessian_at(&self, abar: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let e = self.eval(abar, x);
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for ((r, gk), c) in e.resp.iter().zip(&e.grads).zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            let inv = c.variances_at(abar).map(|v| 1.0 / v);
            let precision = &c.basis * DMatrix::from_diagonal(&inv) * c.basis.transpose();
            h += (gk * gk.transpose() - precision) * *r;
            g.axpy(*r, gk, 1.0);
        }
        h - &g * g.transpose()
    }

    /// Picks a component by weight, then draws from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        // falls back to the last positive-weight component on rounding
        let mut idx = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = k;
                break;
            }
        }
        self.sample_component(idx, rng)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let c = &self.components[k];
        let z = randn(rng, self.dim());
        let scaled = z.component_mul(&c.eigenvalues.map(|d| d.max(0.0).sqrt()));
        &c.mean + &c.basis * scaled
    }
}

/// The VP marginal of a mixture prior at schedule time `t`.
pub fn diffuse_gm(p: &GaussianMixture, schedule: &Schedule, t: f64) -> Result<GaussianMixture> {
    p.diffuse(schedule, t)
}
