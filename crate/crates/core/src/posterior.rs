//! Exact posteriors for linear-Gaussian observations, their MMSE and MAP
//! points, the distortion-perception endpoints and the ideal tradeoff curve.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, spd_inverse, symmetrize};
use crate::metrics::{w2_assign_repeated, w2_gaussian, SampleSet};
use crate::observation::{observe, Observation, Operator};
use crate::prior::{GaussianMixture, GridPrior};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::gaussian(self.mean.clone(), self.cov.clone())
    }
}

fn linear_parts(obs: &Observation) -> Result<&DMatrix<f64>> {
    if obs.sigma_y <= 0.0 {
        return Err(Error::InvalidParameter("closed-form posterior needs sigma_y > 0".into()));
    }
    obs.operator
        .as_linear()
        .map(|a| a.matrix())
        .ok_or_else(|| Error::UnsupportedOperator("closed-form posterior needs a linear operator".into()))
}

/// Conjugate update of one Gaussian component: posterior `(mean, cov)` and
/// the log evidence `log N(y; A m, A S A^T + sigma^2 I)`.
fn conjugate(m: &DVector<f64>, s: &DMatrix<f64>, a: &DMatrix<f64>, y: &DVector<f64>, sigma: f64) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let s2 = sigma * sigma;
    let precision = spd_inverse(s)? + a.tr_mul(a) / s2;
    let cov = spd_inverse(&precision)?;
    let mean = &cov * (spd_inverse(s)? * m + a.tr_mul(y) / s2);
    let evidence_cov = symmetrize(&(a * s * a.transpose())) + DMatrix::identity(a.nrows(), a.nrows()) * s2;
    let chol = evidence_cov
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("evidence covariance".into()))?;
    let r = y - a * m;
    let quad = r.dot(&chol.solve(&r));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_ev = -0.5 * (quad + log_det + a.nrows() as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok((mean, symmetrize(&cov), log_ev))
}

/// `N(mean, cov)` posterior of a single-Gaussian prior under a linear observation.
pub fn gaussian_posterior(prior: &GaussianMixture, obs: &Observation) -> Result<GaussianPosterior> {
    if !prior.is_gaussian() {
        return Err(Error::InvalidParameter(format!(
            "gaussian_posterior needs one component, got {}",
            prior.num_components()
        )));
    }
    let a = linear_parts(obs)?;
    let (mean, cov, _) = conjugate(prior.component_mean(0), prior.component_cov(0), a, &obs.y, obs.sigma_y)?;
    Ok(GaussianPosterior { mean, cov })
}

/// Exact mixture posterior: componentwise conjugate updates, weights
/// proportional to `w_k N(y; A m_k, A S_k A^T + sigma^2 I)`.
pub fn gm_posterior(prior: &GaussianMixture, obs: &Observation) -> Result<GaussianMixture> {
    let a = linear_parts(obs)?;
    if a.ncols() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            got: a.ncols(),
        });
    }
    let mut log_w = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for (k, w) in prior.weights().iter().enumerate() {
        let (m, c, ev) = conjugate(prior.component_mean(k), prior.component_cov(k), a, &obs.y, obs.sigma_y)?;
        log_w.push(w.ln() + ev);
        means.push(m);
        covs.push(c);
    }
    let z = log_sum_exp(&log_w);
    GaussianMixture::normalized(log_w.iter().map(|l| (l - z).exp()).collect(), means, covs)
}

/// Posterior mean.
pub fn mmse(post: &GaussianMixture) -> DVector<f64> {
    post.mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSearch {
    pub point: DVector<f64>,
    pub log_density: f64,
    /// False when no start reached the gradient tolerance; `point` is then the best iterate.
    pub converged: bool,
}

const NEWTON_MAX_ITER: usize = 200;
const NEWTON_GRAD_TOL: f64 = 1e-10;

fn newton_ascent(post: &GaussianMixture, start: &DVector<f64>) -> (DVector<f64>, f64, bool) {
    let mut x = start.clone();
    let mut f = post.log_pdf(&x);
    for _ in 0..NEWTON_MAX_ITER {
        let g = post.score(&x);
        if g.norm() <= NEWTON_GRAD_TOL {
            return (x, f, true);
        }
        let h = post.hessian(&x);
        // Newton direction when the Hessian is negative definite, gradient otherwise.
        let dir = match (-&h).cholesky() {
            Some(chol) => chol.solve(&g),
            None => g.clone(),
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let fc = post.log_pdf(&cand);
            if fc >= f {
                x = cand;
                f = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let converged = post.score(&x).norm() <= NEWTON_GRAD_TOL;
    (x, f, converged)
}

/// Global posterior mode: damped Newton from every component mean and from
/// the MMSE point, keeping the highest-density converged result (earliest
/// start wins ties).
pub fn map_point(post: &GaussianMixture) -> ModeSearch {
    let mut starts = post.means();
    starts.push(mmse(post));
    let mut best: Option<ModeSearch> = None;
    let mut fallback: Option<ModeSearch> = None;
    for s in &starts {
        let (x, f, ok) = newton_ascent(post, s);
        let cand = ModeSearch {
            point: x,
            log_density: f,
            converged: ok,
        };
        let slot = if ok { &mut best } else { &mut fallback };
        if slot.as_ref().map_or(true, |b| f > b.log_density + 1e-12) {
            *slot = Some(cand);
        }
    }
    best.or(fallback).expect("at least one start point")
}

/// Lower-right endpoint of the distortion-perception curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpEndpoints {
    /// `E ||X - E[X|Y]||^2`
    pub d_star: f64,
    /// `W2(p_X, law of E[X|Y])`
    pub p_star: f64,
}

/// Sample count and repetitions for the mixture `P*` estimate.
pub const P_STAR_SAMPLES: usize = 2048;
pub const P_STAR_REPS: usize = 8;

/// `D*` and `P*` for prior and observation model `y = A x + sigma_y n`.
///
/// Closed form for a single Gaussian. For mixtures, `D*` is the Monte-Carlo
/// average of the posterior covariance trace over `n_mc` draws of `y`, and `P*`
/// the assignment W2 between independent prior and MMSE samples
/// (`P_STAR_REPS` blocks of `P_STAR_SAMPLES`).
pub fn dp_endpoints<R: Rng + ?Sized>(
    prior: &GaussianMixture,
    op: &Operator,
    sigma_y: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<DpEndpoints> {
    let n = prior.dim();
    if prior.is_gaussian() {
        let y0 = DVector::zeros(op.out_dim());
        let obs = Observation::new(y0, op.clone(), sigma_y, Default::default())?;
        let post = gaussian_posterior(prior, &obs)?;
        let sigma = prior.component_cov(0);
        let m = prior.component_mean(0);
        // law of total variance: Cov(E[X|Y]) = Cov(X) - E Cov(X|Y)
        let mmse_cov = symmetrize(&(sigma - &post.cov));
        let p_star = w2_gaussian(m, sigma, m, &mmse_cov)?;
        return Ok(DpEndpoints {
            d_star: post.cov.trace(),
            p_star,
        });
    }
    let blocks = P_STAR_SAMPLES * P_STAR_REPS;
    let draws = n_mc.max(blocks);
    let mut trace_sum = 0.0;
    let mut mmse_samples = Vec::with_capacity(draws * n);
    let mut prior_samples = Vec::with_capacity(draws * n);
    for i in 0..draws {
        let x = prior.sample(rng);
        let obs = observe(op, sigma_y, &x, rng)?;
        let post = gm_posterior(prior, &obs)?;
        if i < n_mc {
            trace_sum += post.covariance().trace();
        }
        mmse_samples.extend(mmse(&post).iter().copied());
        prior_samples.extend(prior.sample(rng).iter().copied());
    }
    let a = SampleSet::new(n, prior_samples)?;
    let b = SampleSet::new(n, mmse_samples)?;
    let (p_star, _) = w2_assign_repeated(&a, &b, P_STAR_SAMPLES, P_STAR_REPS)?;
    Ok(DpEndpoints {
        d_star: trace_sum / n_mc.max(1) as f64,
        p_star,
    })
}

/// `D(P) = D* + max(P* - P, 0)^2`.
pub fn ideal_curve(e: &DpEndpoints, p: f64) -> f64 {
    e.d_star + (e.p_star - p).max(0.0).powi(2)
}

/// `(1 - P/P*) x_perceptual + (P/P*) x_mmse`.
pub fn interpolated_estimator(x_perceptual: &DVector<f64>, x_mmse: &DVector<f64>, p: f64, p_star: f64) -> Result<DVector<f64>> {
    if !(p_star > 0.0) {
        return Err(Error::InvalidParameter("interpolation needs P* > 0".into()));
    }
    if !(0.0..=p_star).contains(&p) {
        return Err(Error::InvalidParameter(format!("P = {p} outside [0, {p_star}]")));
    }
    let lam = p / p_star;
    Ok(x_perceptual * (1.0 - lam) + x_mmse * lam)
}

/// Quadrature summary of a tabulated posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosteriorStats {
    pub mmse: DVector<f64>,
    pub map: DVector<f64>,
    /// Strong log-concavity constant of the posterior; `None` if not log-concave.
    pub mu: Option<f64>,
    /// Posterior variance trace `E[||X - mmse||^2 | y]`.
    pub d_star: f64,
}

/// Posterior statistics by quadrature on the prior's lattice, for any operator
/// with a Gaussian likelihood.
pub fn grid_posterior_stats(prior: &GridPrior, obs: &Observation) -> Result<GridPosteriorStats> {
    if obs.dim() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            got: obs.dim(),
        });
    }
    if obs.sigma_y <= 0.0 {
        return Err(Error::InvalidParameter("grid posterior needs sigma_y > 0".into()));
    }
    let post = prior.tilt(|x| -obs.residual(x).norm_squared() / (2.0 * obs.sigma_y * obs.sigma_y))?;
    let leak = post.boundary_mass();
    if leak > 1e-9 {
        return Err(Error::MassLeak { mass: leak });
    }
    let weights = post.node_log_weights();
    let table = post.log_density_table();
    let n = prior.dim();
    let mut mean = DVector::zeros(n);
    let mut second = 0.0;
    let mut best = 0;
    for i in 0..post.num_nodes() {
        let p = (table[i] + weights[i]).exp();
        let x = post.node(i);
        second += p * x.norm_squared();
        mean += x * p;
        if table[i] > table[best] {
            best = i;
        }
    }
    let map = refine_mode(&post, best);
    let mu = match crate::prior::strong_concavity_mu(&crate::prior::Prior::Grid(post), &DMatrix::zeros(n, n)) {
        Ok(mu) => Some(mu),
        Err(Error::NotLogConcave { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(GridPosteriorStats {
        d_star: (second - mean.norm_squared()).max(0.0),
        mmse: mean,
        map,
        mu,
    })
}

/// Parabolic refinement of the lattice argmax along each axis.
fn refine_mode(post: &GridPrior, idx: usize) -> DVector<f64> {
    let lat = post.lattice();
    let n = lat.points;
    let h = lat.spacing();
    let table = post.log_density_table();
    let mut x = post.node(idx);
    let strides: Vec<usize> = if post.dim() == 1 { vec![1] } else { vec![n, 1] };
    let coords: Vec<usize> = if post.dim() == 1 { vec![idx] } else { vec![idx / n, idx % n] };
    for (axis, stride) in strides.iter().enumerate() {
        let c = coords[axis];
        if c == 0 || c + 1 == n {
            continue;
        }
        let (l, m, r) = (table[idx - stride], table[idx], table[idx + stride]);
        let curv = l - 2.0 * m + r;
        if curv < 0.0 {
            x[axis] += 0.5 * h * (l - r) / curv;
        }
    }
    x
}
