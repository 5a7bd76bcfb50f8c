//! Score models for the diffused prior and posterior.
//!
//! Times are integer schedule indices. The canonical object is the score
//! `grad log p_t`; the noise-prediction view is `eps_hat = -sqrt(1 - abar) score`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{randn, symmetrize};
use crate::observation::{loglik_grad, LikelihoodForm, Observation};
use crate::prior::{DiffusedGrid, GaussianMixture, GridPrior};
use crate::schedule::Schedule;

/// `abar` below which Tweedie's formula is refused.
pub const TWEEDIE_ALPHA_BAR_MIN: f64 = 1e-8;

pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &Schedule;

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>>;

    /// Jacobian of the score in `x`. Central differences unless overridden.
    fn hessian(&self, x: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let step = 1e-5 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let col = (self.score(&xp, t)? - self.score(&xm, t)?) / (2.0 * step);
            h.set_column(j, &col);
        }
        Ok(symmetrize(&h))
    }
}

fn check_time(s: &Schedule, t: usize) -> Result<()> {
    if t > s.num_steps() {
        return Err(Error::TimeOutOfRange {
            t: t as f64,
            max: s.num_steps() as f64,
        });
    }
    Ok(())
}

/// Closed-form score of a diffused Gaussian mixture. Backed by the prior this
/// is the exact prior score; backed by an exact posterior mixture it is the
/// exact posterior score.
#[derive(Debug, Clone)]
pub struct MixtureScore {
    mixture: GaussianMixture,
    schedule: Schedule,
}

impl MixtureScore {
    pub fn new(mixture: GaussianMixture, schedule: Schedule) -> Self {
        Self { mixture, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn log_density(&self, x: &DVector<f64>, t: usize) -> Result<f64> {
        check_time(&self.schedule, t)?;
        Ok(self.mixture.log_pdf_at(self.schedule.alpha_bar(t), x))
    }
}

impl ScoreModel for MixtureScore {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        check_time(&self.schedule, t)?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.mixture.score_at(self.schedule.alpha_bar(t), x))
    }

    fn hessian(&self, x: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        check_time(&self.schedule, t)?;
        Ok(self.mixture.hessian_at(self.schedule.alpha_bar(t), x))
    }
}

/// Exact posterior score: the analytic score of the diffused posterior mixture.
pub fn exact_posterior_score(post: &GaussianMixture, s: &Schedule, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    check_time(s, t)?;
    Ok(post.score_at(s.alpha_bar(t), x_t))
}

/// Score of a tabulated prior, precomputed at a fixed set of times.
#[derive(Debug, Clone)]
pub struct GridScore {
    dim: usize,
    schedule: Schedule,
    tables: BTreeMap<usize, DiffusedGrid>,
}

impl GridScore {
    /// Diffuses `prior` to each of `times`. Each table costs one quadrature
    /// convolution (quadratic in the lattice size per axis pass).
    pub fn new(prior: &GridPrior, schedule: Schedule, times: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::with_workers(prior, schedule, times, 1)
    }

    /// As [`GridScore::new`], building the tables on `workers` threads.
    pub fn with_workers(prior: &GridPrior, schedule: Schedule, times: impl IntoIterator<Item = usize>, workers: usize) -> Result<Self> {
        let times: Vec<usize> = times.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        for &t in &times {
            check_time(&schedule, t)?;
        }
        let chunk = times.len().div_ceil(workers.max(1)).max(1);
        let tables = std::thread::scope(|scope| {
            let handles: Vec<_> = times
                .chunks(chunk)
                .map(|part| {
                    let schedule = &schedule;
                    scope.spawn(move || part.iter().map(|&t| (t, prior.diffuse_with(schedule.alpha_bar(t)))).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("table worker panicked"))
                .collect::<BTreeMap<_, _>>()
        });
        Ok(Self {
            dim: prior.dim(),
            schedule,
            tables,
        })
    }

    pub fn times(&self) -> impl Iterator<Item = usize> + '_ {
        self.tables.keys().copied()
    }
}

impl ScoreModel for GridScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.tables
            .get(&t)
            .ok_or_else(|| Error::InvalidParameter(format!("grid score was not tabulated at t = {t}")))?
            .score(x)
    }
}

/// Tweedie denoiser `x0_hat = (x_t + (1 - abar) score(x_t)) / sqrt(abar)`.
pub fn tweedie_denoise(prior: &dyn ScoreModel, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    check_time(prior.schedule(), t)?;
    let abar = prior.schedule().alpha_bar(t);
    if abar < TWEEDIE_ALPHA_BAR_MIN {
        return Err(Error::InvalidParameter(format!("alpha_bar {abar:e} too small for Tweedie")));
    }
    if abar == 1.0 {
        return Ok(x_t.clone());
    }
    Ok((x_t + prior.score(x_t, t)? * (1.0 - abar)) / abar.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Jacobian {
    /// Differentiate through the denoiser: `(I + (1 - abar) hess) / sqrt(abar)`.
    #[default]
    Full,
    /// Treat the denoiser as `x_t / sqrt(abar)` for the gradient.
    StopGrad,
}

/// Prior score plus `xi` times the gradient of `log p(y | x0_hat(x_t))`.
///
/// For the squared form with `sigma_y > 0` the data term is the Gaussian
/// log-likelihood `-||y - A x0_hat||^2 / (2 sigma_y^2)`; otherwise the unnormalized
/// residual (squared or norm) is used with `xi` as its only weight.
pub struct DpsScore {
    prior: Arc<dyn ScoreModel>,
    obs: Observation,
    xi: f64,
    jacobian: Jacobian,
}

impl DpsScore {
    pub fn new(prior: Arc<dyn ScoreModel>, obs: Observation, xi: f64, jacobian: Jacobian) -> Result<Self> {
        if obs.dim() != prior.dim() {
            return Err(Error::DimensionMismatch {
                expected: prior.dim(),
                got: obs.dim(),
            });
        }
        if !(xi >= 0.0) {
            return Err(Error::InvalidParameter(format!("xi = {xi} must be >= 0")));
        }
        Ok(Self {
            prior,
            obs,
            xi,
            jacobian,
        })
    }

    fn data_weight(&self) -> f64 {
        match self.obs.form {
            LikelihoodForm::Squared if self.obs.sigma_y > 0.0 => 1.0 / (2.0 * self.obs.sigma_y * self.obs.sigma_y),
            _ => 1.0,
        }
    }
}

impl ScoreModel for DpsScore {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn schedule(&self) -> &Schedule {
        self.prior.schedule()
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let prior_score = self.prior.score(x, t)?;
        if self.xi == 0.0 {
            return Ok(prior_score);
        }
        let abar = self.schedule().alpha_bar(t);
        if abar < TWEEDIE_ALPHA_BAR_MIN {
            return Err(Error::InvalidParameter(format!("alpha_bar {abar:e} too small for Tweedie")));
        }
        let x0 = (x + &prior_score * (1.0 - abar)) / abar.sqrt();
        let g = loglik_grad(&self.obs, &x0) * self.data_weight();
        let pulled = match self.jacobian {
            Jacobian::StopGrad => g / abar.sqrt(),
            Jacobian::Full => {
                let h = self.prior.hessian(x, t)?;
                (&g + h.tr_mul(&g) * (1.0 - abar)) / abar.sqrt()
            }
        };
        Ok(prior_score + pulled * self.xi)
    }
}

/// `dps_score` as a free function for one-off evaluation.
pub fn dps_score(
    prior: Arc<dyn ScoreModel>,
    obs: &Observation,
    x_t: &DVector<f64>,
    t: usize,
    xi: f64,
    jacobian: Jacobian,
) -> Result<DVector<f64>> {
    DpsScore::new(prior, obs.clone(), xi, jacobian)?.score(x_t, t)
}

/// Stochastic prior-gradient estimate `w * score_{t1}(x_{t1})` with
/// `x_{t1} = sqrt(abar) x + sqrt(1 - abar) eps`. Its expectation is a positive
/// multiple of `grad log p_X(x)`; see [`exact_prior_weight`] for the Gaussian
/// weight that makes the multiple one.
pub fn prior_grad_estimate<R: Rng + ?Sized>(
    prior: &dyn ScoreModel,
    x: &DVector<f64>,
    t1: usize,
    w: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let s = prior.schedule();
    if t1 == 0 || t1 >= s.num_steps() {
        return Err(Error::TimeOutOfRange {
            t: t1 as f64,
            max: s.num_steps() as f64,
        });
    }
    let abar = s.alpha_bar(t1);
    let x_t = x * abar.sqrt() + randn(rng, x.len()) * (1.0 - abar).sqrt();
    Ok(prior.score(&x_t, t1)? * w)
}

/// Posterior variance `r^2 = sigma^2 (1 - abar) / (abar sigma^2 + 1 - abar)` of
/// `x_0` given `x_t` for an isotropic Gaussian prior of variance `sigma2`.
pub fn gaussian_r2(abar: f64, sigma2: f64) -> f64 {
    sigma2 * (1.0 - abar) / (abar * sigma2 + 1.0 - abar)
}

/// Weight `(1 - abar) / (r^2 sqrt(abar))` making [`prior_grad_estimate`]
/// unbiased for `grad log p_X` under an isotropic Gaussian prior.
pub fn exact_prior_weight(abar: f64, sigma2: f64) -> f64 {
    (1.0 - abar) / (gaussian_r2(abar, sigma2) * abar.sqrt())
}

/// Noise-prediction view of a score: `-sqrt(1 - abar) score`.
pub fn epsilon_view(score: &DVector<f64>, abar: f64) -> DVector<f64> {
    score * -(1.0 - abar).sqrt()
}

/// Empirical one-sided Lipschitz constant: the largest
/// `<s(a) - s(b), a - b> / ||a - b||^2` over random pairs drawn uniformly from
/// the box `center +- radius`.
pub fn one_sided_lipschitz<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    t: usize,
    center: &DVector<f64>,
    radius: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = model.dim();
    let draw = |rng: &mut R| center + DVector::from_iterator(n, (0..n).map(|_| radius * (2.0 * rng.random::<f64>() - 1.0)));
    let mut best = f64::NEG_INFINITY;
    for _ in 0..n_pairs {
        let a = draw(rng);
        let b = draw(rng);
        let d = &a - &b;
        let dn = d.norm_squared();
        if dn == 0.0 {
            continue;
        }
        let ds = model.score(&a, t)? - model.score(&b, t)?;
        best = best.max(ds.dot(&d) / dn);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::LinearOperator;
    use crate::posterior::{gaussian_posterior, gm_posterior};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn unit() -> Arc<dyn ScoreModel> {
        Arc::new(MixtureScore::new(GaussianMixture::standard(1), Schedule::default_linear()))
    }

    fn id_obs(y: f64, sigma: f64) -> Observation {
        Observation::new(v1(y), LinearOperator::identity(1).into(), sigma, LikelihoodForm::Squared).unwrap()
    }

    #[test]
    fn posterior_score_examples() {
        let s = Schedule::default_linear();
        let post = gaussian_posterior(&GaussianMixture::standard(1), &id_obs(1.0, 1.0))
            .unwrap()
            .to_mixture()
            .unwrap();
        assert!(exact_posterior_score(&post, &s, &v1(0.5), 0).unwrap()[0].abs() < 1e-14);
        let unit_post = GaussianMixture::standard(1);
        for t in [0, 10, 500, 1000] {
            assert!((exact_posterior_score(&unit_post, &s, &v1(1.0), t).unwrap()[0] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tweedie_examples() {
        let s = Schedule::linear(2, 0.5, 0.5).unwrap();
        let m: Arc<dyn ScoreModel> = Arc::new(MixtureScore::new(GaussianMixture::standard(1), s));
        assert!((tweedie_denoise(m.as_ref(), &v1(1.0), 2).unwrap()[0] - 0.5).abs() < 1e-12);
        assert_eq!(tweedie_denoise(m.as_ref(), &v1(0.3), 0).unwrap(), v1(0.3));
        let tight = MixtureScore::new(
            GaussianMixture::gaussian(v1(2.0), DMatrix::from_element(1, 1, 1e-6)).unwrap(),
            Schedule::default_linear(),
        );
        for (x, t) in [(-3.0, 100), (5.0, 700)] {
            assert!((tweedie_denoise(&tight, &v1(x), t).unwrap()[0] - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dps_reduces_to_prior_score() {
        let prior = unit();
        let x = v1(0.7);
        let t = 300;
        let x0 = tweedie_denoise(prior.as_ref(), &x, t).unwrap();
        let consistent = id_obs(x0[0], 1.0);
        let got = dps_score(prior.clone(), &consistent, &x, t, 1.0, Jacobian::Full).unwrap();
        assert!((got - prior.score(&x, t).unwrap()).amax() < 1e-12);
        let off = dps_score(prior.clone(), &id_obs(3.0, 1.0), &x, t, 0.0, Jacobian::Full).unwrap();
        assert_eq!(off, prior.score(&x, t).unwrap());
    }

    #[test]
    fn dps_is_exact_at_zero_noise() {
        let s = Schedule::default_linear();
        let obs = id_obs(1.0, 0.8);
        let post = gm_posterior(&GaussianMixture::standard(1), &obs).unwrap();
        for x in [-2.0, 0.0, 1.3] {
            let d = dps_score(unit(), &obs, &v1(x), 0, 1.0, Jacobian::Full).unwrap();
            let e = exact_posterior_score(&post, &s, &v1(x), 0).unwrap();
            assert!((d - e).amax() < 1e-8);
        }
    }

    #[test]
    fn stopgrad_differs_from_full_chain_away_from_zero_noise() {
        let obs = id_obs(1.0, 0.5);
        let x = v1(0.2);
        let full = dps_score(unit(), &obs, &x, 400, 1.0, Jacobian::Full).unwrap();
        let stop = dps_score(unit(), &obs, &x, 400, 1.0, Jacobian::StopGrad).unwrap();
        assert!((full - stop).amax() > 1e-3);
    }

    #[test]
    fn prior_gradient_weight_identity() {
        let prior = unit();
        let s = Schedule::default_linear();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for t1 in [10, 50, 200] {
            let w = exact_prior_weight(s.alpha_bar(t1), 1.0);
            let n = 100_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| prior_grad_estimate(prior.as_ref(), &v1(1.0), t1, w, &mut rng).unwrap()[0])
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((mean + 1.0).abs() < 3.0 * sd / (n as f64).sqrt(), "t1={t1}: {mean}");
        }
    }

    #[test]
    fn prior_gradient_is_linear_in_weight() {
        let prior = unit();
        let a = prior_grad_estimate(prior.as_ref(), &v1(0.4), 50, 1.0, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        let b = prior_grad_estimate(prior.as_ref(), &v1(0.4), 50, 2.0, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        assert!((b - a * 2.0).amax() < 1e-15);
        assert!(prior_grad_estimate(prior.as_ref(), &v1(0.4), 0, 1.0, &mut ChaCha12Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn mixture_hessian_matches_default_differences() {
        struct Plain(MixtureScore);
        impl ScoreModel for Plain {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn schedule(&self) -> &Schedule {
                self.0.schedule()
            }
            fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
                self.0.score(x, t)
            }
        }
        let gm = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![-1.0, 0.5]), DVector::from_vec(vec![1.0, -0.5])],
            vec![DMatrix::identity(2, 2) * 0.5, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6])],
        )
        .unwrap();
        let m = MixtureScore::new(gm, Schedule::default_linear());
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let exact = m.hessian(&x, 120).unwrap();
        let numeric = Plain(m).hessian(&x, 120).unwrap();
        assert!((exact - numeric).amax() < 1e-6);
    }

    #[test]
    fn lipschitz_of_unit_gaussian_score() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let l = one_sided_lipschitz(unit().as_ref(), 300, &v1(0.0), 3.0, 1000, &mut rng).unwrap();
        assert!((l + 1.0).abs() < 1e-9);
    }

    #[test]
    fn epsilon_view_roundtrip() {
        let eps = epsilon_view(&v1(-2.0), 0.75);
        assert!((eps[0] - 1.0).abs() < 1e-15);
    }
}
