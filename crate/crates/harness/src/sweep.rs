//! Distortion-perception sweeps: for every trial draw (or reuse) an
//! observation, run Stage 1 once, then Stage 2 from each re-noising time.
//!
//! Random streams are derived from the root seed by purpose tag and index:
//! trial data `(DATA, trial, 0)`, Stage 1 `(STAGE1, trial, 0)` and Stage 2
//! `(STAGE2, t0, trial)`. Adding a `t0` therefore leaves every other number
//! unchanged, and the split of trials across workers does not matter.


use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use maprps::latent::LatentLikelihood;
use maprps::linalg::{mean_cov, symmetrize};
use maprps::metrics::{mean_stderr, w2_1d, w2_assign_repeated, w2_gaussian, DpCurvePoint, SampleSet, ASSIGNMENT_CAP};
use maprps::observation::{observe, Likelihood, Observation};
use maprps::posterior::{dp_endpoints, gaussian_posterior, gm_posterior, grid_posterior_stats, mmse, DpEndpoints, GridPosteriorStats};
use maprps::prior::{GaussianMixture, GridPrior, Prior};
use maprps::rng::{stream, tag};
use maprps::score::{DpsScore, MixtureScore, ScoreModel};
use maprps::solver::{map_stage, rps_stage, Stage2Config};

use crate::config::{EstimatorSection, Experiment, Mode, ScoreKind};
use crate::HarnessError;

/// Number of batches behind the standard errors of the moment and quantile estimators.
pub const STDERR_BATCHES: usize = 8;
/// Observation draws behind Monte-Carlo `D*` estimates.
pub const ENDPOINT_DRAWS: usize = 10_000;
/// Observation draws behind grid-prior endpoint estimates (each needs a quadrature pass).
pub const GRID_ENDPOINT_DRAWS: usize = 4096;
/// Points in the sampled ideal curve.
pub const IDEAL_CURVE_POINTS: usize = 65;

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub jobs: usize,
    /// Keep every output point (per `t0`, in trial order).
    pub keep_outputs: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            keep_outputs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<DpCurvePoint>,
    pub endpoints: Option<DpEndpoints>,
    /// `(P, D(P))` samples of the ideal curve.
    pub ideal_curve: Vec<(f64, f64)>,
    pub provenance: Provenance,
    pub failed_trials: usize,
    /// Per `t0`, the data-space outputs of the successful trials (when kept).
    pub outputs: Vec<Vec<DVector<f64>>>,
    /// Data-space Stage-1 outputs of the successful trials (when kept).
    pub x_maps: Vec<DVector<f64>>,
}

/// Exact posterior summary for one observation, in data coordinates.
#[derive(Debug, Clone)]
pub struct PosteriorOracle {
    pub mmse: DVector<f64>,
    pub d_star: f64,
    pub map: Option<DVector<f64>>,
    /// Strong log-concavity constant, when the posterior has one.
    pub mu: Option<f64>,
    pub law: PosteriorLaw,
}

#[derive(Debug, Clone)]
pub enum PosteriorLaw {
    /// Working-coordinate mixture (decode before use when a codec is set).
    Mixture(GaussianMixture),
    Grid(GridPrior),
}

/// One observation and its ground truth.
#[derive(Debug, Clone)]
pub struct TrialProblem {
    pub x_true: DVector<f64>,
    pub obs: Observation,
    /// The observation on working coordinates.
    pub working: Observation,
}

impl Experiment {
    /// The observation of `trial`: the fixed one in conditional mode, a fresh
    /// draw from the generative model otherwise.
    pub fn trial_problem(&self, trial: u64) -> Result<TrialProblem, maprps::Error> {
        let (x_true, obs) = match &self.fixed {
            Some((x, o)) => (x.clone(), o.clone()),
            None => {
                let mut rng = stream(self.cfg.seed, tag::DATA, trial, 0);
                let z = self.prior.sample(&mut rng);
                let x = self.decode(&z);
                let mut o = observe(&self.operator, self.cfg.observation.sigma_y, &x, &mut rng)?;
                o.form = self.form;
                (x, o)
            }
        };
        let working = self.working_observation(&obs)?;
        Ok(TrialProblem { x_true, obs, working })
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        self.codec.as_ref().map_or_else(|| z.clone(), |c| c.decode(z))
    }

    /// Exact posterior for `obs` when one exists (gm prior with a linear
    /// operator, or grid prior), summarized in data coordinates.
    pub fn posterior_oracle(&self, obs: &Observation) -> Result<Option<PosteriorOracle>, maprps::Error> {
        if obs.sigma_y <= 0.0 {
            return Ok(None);
        }
        match &self.prior {
            Prior::Mixture(gm) => {
                if obs.operator.as_linear().is_none() {
                    return Ok(None);
                }
                let wobs = self.working_observation(obs)?;
                let post = gm_posterior(gm, &wobs)?;
                let w = self.codec.as_ref().map(|c| c.decode_matrix());
                let cov = post.covariance();
                let d_star = match w {
                    Some(w) => (w * &cov * w.transpose()).trace(),
                    None => cov.trace(),
                };
                let map = maprps::posterior::map_point(&post);
                let mu = if gm.is_gaussian() {
                    maprps::prior::strong_concavity_mu(&self.prior, &wobs.likelihood_curvature()?).ok()
                } else {
                    None
                };
                Ok(Some(PosteriorOracle {
                    mmse: self.decode(&mmse(&post)),
                    d_star,
                    map: map.converged.then(|| self.decode(&map.point)),
                    mu,
                    law: PosteriorLaw::Mixture(post),
                }))
            }
            Prior::Grid(g) => {
                let GridPosteriorStats { mmse, map, mu, d_star } = grid_posterior_stats(g, obs)?;
                let s2 = 2.0 * obs.sigma_y * obs.sigma_y;
                let law = g.tilt(|x| -obs.residual(x).norm_squared() / s2)?;
                Ok(Some(PosteriorOracle {
                    mmse,
                    d_star,
                    map: Some(map),
                    mu,
                    law: PosteriorLaw::Grid(law),
                }))
            }
        }
    }

    /// Posterior score on working coordinates for one observation.
    pub fn posterior_score(&self, problem: &TrialProblem) -> Result<Box<dyn ScoreModel>, maprps::Error> {
        match self.cfg.score.score {
            ScoreKind::Exact => {
                let gm = self
                    .prior
                    .as_mixture()
                    .ok_or_else(|| maprps::Error::InvalidParameter("exact score needs a gm prior".into()))?;
                let post = gm_posterior(gm, &problem.working)?;
                Ok(Box::new(MixtureScore::new(post, self.schedule.clone())))
            }
            ScoreKind::Dps => Ok(Box::new(DpsScore::new(
                self.stage2_prior_score(1)?,
                problem.working.clone(),
                self.cfg.score.xi,
                self.jacobian(),
            )?)),
        }
    }

    /// Stage 1 for `trial`; returns the working-coordinate MAP point and trace.
    pub fn run_stage1(&self, problem: &TrialProblem, trial: u64) -> Result<maprps::solver::Stage1Output, maprps::Error> {
        let mut rng = stream(self.cfg.seed, tag::STAGE1, trial, 0);
        match &self.codec {
            Some(codec) => {
                let lik = LatentLikelihood { codec, obs: &problem.obs };
                map_stage(&lik, self.prior_score.as_ref(), &self.stage1, None, &mut rng)
            }
            None => map_stage(&problem.obs as &dyn Likelihood, self.prior_score.as_ref(), &self.stage1, None, &mut rng),
        }
    }

    /// The perception estimator `auto` resolves to.
    pub fn estimator(&self) -> EstimatorSection {
        match self.cfg.perception.estimator {
            EstimatorSection::Auto => {
                let gaussian_outputs = self.prior.as_mixture().is_some_and(|g| g.is_gaussian())
                    && self.operator.as_linear().is_some()
                    && self.cfg.observation.sigma_y > 0.0
                    && self.cfg.score.score == ScoreKind::Exact;
                if gaussian_outputs {
                    EstimatorSection::Gaussian
                } else if self.data_dim() == 1 {
                    EstimatorSection::Quantile
                } else {
                    EstimatorSection::Assign
                }
            }
            other => other,
        }
    }
}

struct TrialOutcome {
    x_map: DVector<f64>,
    outputs: Vec<DVector<f64>>,
    distortions: Vec<f64>,
}

fn run_trial(exp: &Experiment, trial: u64, oracle: Option<&PosteriorOracle>) -> Result<TrialOutcome, maprps::Error> {
    let problem = exp.trial_problem(trial)?;
    let score = exp.posterior_score(&problem)?;
    let s1 = exp.run_stage1(&problem, trial)?;
    let mut outputs = Vec::with_capacity(exp.cfg.t0_grid.len());
    let mut distortions = Vec::with_capacity(exp.cfg.t0_grid.len());
    for &t0 in &exp.cfg.t0_grid {
        let cfg2 = Stage2Config {
            t0,
            stride: exp.cfg.stage2.stride,
        };
        let mut rng = stream(exp.cfg.seed, tag::STAGE2, t0 as u64, trial);
        let x = exp.decode(&rps_stage(&s1.x_map, score.as_ref(), &cfg2, &mut rng)?);
        distortions.push(match oracle {
            // expected squared error against a fresh posterior draw
            Some(o) => o.d_star + (&x - &o.mmse).norm_squared(),
            None => (&x - &problem.x_true).norm_squared(),
        });
        outputs.push(x);
    }
    Ok(TrialOutcome {
        x_map: exp.decode(&s1.x_map),
        outputs,
        distortions,
    })
}

/// Runs trials `0..n` on `jobs` threads; results come back in trial order.
fn run_trials(exp: &Experiment, jobs: usize, oracle: Option<&PosteriorOracle>) -> Vec<Result<TrialOutcome, maprps::Error>> {
    let n = exp.cfg.n_trials;
    let jobs = jobs.clamp(1, n);
    if jobs == 1 {
        return (0..n as u64).map(|t| run_trial(exp, t, oracle)).collect();
    }
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let range = (j * chunk).min(n)..((j + 1) * chunk).min(n);
                scope.spawn(move || range.map(|t| run_trial(exp, t as u64, oracle)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Where perception is measured against.
pub struct Reference {
    pub samples: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn decoded_moments(exp: &Experiment, mean: DVector<f64>, cov: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    match &exp.codec {
        Some(c) => {
            let w = c.decode_matrix();
            (c.decode(&mean), symmetrize(&(w * cov * w.transpose())))
        }
        None => (mean, cov),
    }
}

/// Reference law: the prior (marginal mode) or the posterior (conditional
/// mode), pushed to data space. Sample count depends on the estimator.
pub fn build_reference(exp: &Experiment, oracle: Option<&PosteriorOracle>, n_outputs: usize) -> Result<Reference, maprps::Error> {
    let p = &exp.cfg.perception;
    let count = match exp.estimator() {
        EstimatorSection::Quantile => n_outputs * p.reference_factor,
        EstimatorSection::Assign => p.m.min(ASSIGNMENT_CAP) * p.reps,
        _ => 0,
    };
    // exact moments where the law is a (decoded) mixture; tabulated laws
    // fall back to sample moments, so they always get a sample
    let exact = match (exp.cfg.mode, oracle.map(|o| &o.law)) {
        (Mode::Conditional, Some(PosteriorLaw::Mixture(post))) => Some(decoded_moments(exp, post.mean(), post.covariance())),
        (Mode::Conditional, Some(PosteriorLaw::Grid(_))) => None,
        (Mode::Conditional, None) => {
            return Err(maprps::Error::InvalidParameter("conditional mode needs a posterior oracle".into()));
        }
        (Mode::Marginal, _) => exp.prior.as_mixture().map(|gm| decoded_moments(exp, gm.mean(), gm.covariance())),
    };
    let count = if exact.is_none() { count.max(n_outputs * p.reference_factor) } else { count };
    let mut rng = stream(exp.cfg.seed, tag::REFERENCE, 0, 0);
    let samples: Vec<DVector<f64>> = match (exp.cfg.mode, oracle.map(|o| &o.law)) {
        (Mode::Conditional, Some(PosteriorLaw::Mixture(post))) => (0..count).map(|_| exp.decode(&post.sample(&mut rng))).collect(),
        (Mode::Conditional, Some(PosteriorLaw::Grid(post))) => post.sample_n(count, &mut rng),
        _ => exp.prior.sample_n(count, &mut rng).iter().map(|z| exp.decode(z)).collect(),
    };
    let moments = exact;
    let (mean, cov) = match moments {
        Some(m) => m,
        None => {
            let (m, c) = mean_cov(&samples);
            (m, symmetrize(&c))
        }
    };
    Ok(Reference { samples, mean, cov })
}

fn moment_w2(xs: &[DVector<f64>], r: &Reference) -> Result<f64, maprps::Error> {
    let (m, c) = mean_cov(xs);
    w2_gaussian(&m, &symmetrize(&c), &r.mean, &r.cov)
}

/// `sqrt(mean_i (x_(i) - Q_ref((i + 1/2) / n))^2)`: sorted outputs against
/// quantiles of a larger sorted reference sample.
pub fn w2_quantile(sorted: &[f64], reference_sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let big = reference_sorted.len();
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let q = (i as f64 + 0.5) / n as f64;
            let j = ((q * big as f64) as usize).min(big - 1);
            (x - reference_sorted[j]).powi(2)
        })
        .sum();
    (sum / n as f64).sqrt()
}

fn sorted_first(xs: &[DVector<f64>]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.iter().map(|x| x[0]).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn batch_stderr(xs: &[DVector<f64>], f: impl Fn(&[DVector<f64>]) -> Result<f64, maprps::Error>) -> Result<Option<f64>, maprps::Error> {
    if xs.len() < 2 * STDERR_BATCHES {
        return Ok(None);
    }
    let size = xs.len() / STDERR_BATCHES;
    let values: Result<Vec<f64>, _> = (0..STDERR_BATCHES).map(|b| f(&xs[b * size..(b + 1) * size])).collect();
    Ok(mean_stderr(&values?).ok().map(|(_, se)| se))
}

/// W2 between outputs and the reference law, with a standard error.
pub fn perception(exp: &Experiment, xs: &[DVector<f64>], r: &Reference) -> Result<(f64, Option<f64>), maprps::Error> {
    match exp.estimator() {
        EstimatorSection::Gaussian | EstimatorSection::Auto => {
            let w = moment_w2(xs, r)?;
            Ok((w, batch_stderr(xs, |b| moment_w2(b, r))?))
        }
        EstimatorSection::Quantile => {
            if exp.data_dim() != 1 {
                return Err(maprps::Error::InvalidParameter("the quantile estimator is one-dimensional".into()));
            }
            let reference = sorted_first(&r.samples);
            let w = w2_quantile(&sorted_first(xs), &reference);
            Ok((w, batch_stderr(xs, |b| Ok(w2_quantile(&sorted_first(b), &reference)))?))
        }
        EstimatorSection::Assign => {
            let p = &exp.cfg.perception;
            let reps = p.reps.min(xs.len());
            let m = (xs.len() / reps).min(p.m).min(ASSIGNMENT_CAP).min(r.samples.len() / reps);
            if m == 0 {
                return Err(maprps::Error::TooFewSamples { need: reps, got: xs.len() });
            }
            let a = SampleSet::from_vectors(&xs[..m * reps])?;
            let b = SampleSet::from_vectors(&r.samples[..m * reps])?;
            if a.dim() == 1 {
                // sorted coupling is exact in one dimension
                let values: Result<Vec<f64>, _> = (0..reps).map(|k| w2_1d(&a.slice(k * m, m), &b.slice(k * m, m))).collect();
                let values = values?;
                return Ok(match mean_stderr(&values) {
                    Ok((mean, se)) => (mean, Some(se)),
                    Err(_) => (values[0], None),
                });
            }
            w2_assign_repeated(&a, &b, m, reps)
        }
    }
}

/// `D*` and `P*`: for the marginal problem (averaged over observations) or,
/// in conditional mode, for the fixed observation, where `P* = sqrt(D*)` is
/// the W2 distance from the posterior to a point mass at its mean.
pub fn endpoints(exp: &Experiment, oracle: Option<&PosteriorOracle>) -> Result<Option<DpEndpoints>, maprps::Error> {
    if exp.fixed.is_some() {
        return Ok(oracle.map(|o| DpEndpoints {
            d_star: o.d_star,
            p_star: o.d_star.sqrt(),
        }));
    }
    let sigma_y = exp.cfg.observation.sigma_y;
    if sigma_y <= 0.0 {
        return Ok(None);
    }
    let mut rng = stream(exp.cfg.seed, tag::ORACLE, 0, 0);
    let linear = exp.operator.as_linear().is_some();
    match (&exp.prior, &exp.codec) {
        (Prior::Mixture(gm), None) if linear => Ok(Some(dp_endpoints(gm, &exp.operator, sigma_y, ENDPOINT_DRAWS, &mut rng)?)),
        (Prior::Mixture(gm), Some(codec)) if linear && gm.is_gaussian() => {
            let obs = exp.working_observation(&Observation::new(
                DVector::zeros(exp.operator.out_dim()),
                exp.operator.clone(),
                sigma_y,
                exp.form,
            )?)?;
            let post = gaussian_posterior(gm, &obs)?;
            let w = codec.decode_matrix();
            let sigma = gm.component_cov(0);
            let mean = codec.decode(gm.component_mean(0));
            let prior_cov = symmetrize(&(w * sigma * w.transpose()));
            let mmse_cov = symmetrize(&(w * (sigma - &post.cov) * w.transpose()));
            Ok(Some(DpEndpoints {
                d_star: (w * &post.cov * w.transpose()).trace(),
                p_star: w2_gaussian(&mean, &prior_cov, &mean, &mmse_cov)?,
            }))
        }
        (Prior::Mixture(_), Some(_)) if linear => monte_carlo_endpoints(exp, &mut rng).map(Some),
        (Prior::Grid(_), _) => monte_carlo_endpoints(exp, &mut rng).map(Some),
        _ => Ok(None),
    }
}

fn monte_carlo_endpoints(exp: &Experiment, rng: &mut maprps::rng::Stream) -> Result<DpEndpoints, maprps::Error> {
    let draws = match exp.prior {
        Prior::Grid(_) => GRID_ENDPOINT_DRAWS,
        Prior::Mixture(_) => ENDPOINT_DRAWS,
    };
    let sigma_y = exp.cfg.observation.sigma_y;
    let mut trace_sum = 0.0;
    let mut mmse_points = Vec::with_capacity(draws);
    let mut prior_points = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = exp.decode(&exp.prior.sample(rng));
        let obs = observe(&exp.operator, sigma_y, &x, rng)?;
        let o = exp
            .posterior_oracle(&obs)?
            .ok_or_else(|| maprps::Error::UnsupportedOperator("no posterior oracle for this observation".into()))?;
        trace_sum += o.d_star;
        mmse_points.push(o.mmse);
        prior_points.push(exp.decode(&exp.prior.sample(rng)));
    }
    let a = SampleSet::from_vectors(&prior_points)?;
    let b = SampleSet::from_vectors(&mmse_points)?;
    let p_star = if a.dim() == 1 {
        w2_1d(&a, &b)?
    } else {
        let reps = 4;
        w2_assign_repeated(&a, &b, (draws / reps).min(1024), reps)?.0
    };
    Ok(DpEndpoints {
        d_star: trace_sum / draws as f64,
        p_star,
    })
}

/// `(P, D(P))` over `[0, p_max]`.
pub fn sample_ideal_curve(e: &DpEndpoints, p_max: f64) -> Vec<(f64, f64)> {
    let top = p_max.max(e.p_star);
    (0..IDEAL_CURVE_POINTS)
        .map(|i| {
            let p = top * i as f64 / (IDEAL_CURVE_POINTS - 1) as f64;
            (p, maprps::posterior::ideal_curve(e, p))
        })
        .collect()
}

pub fn provenance(exp: &Experiment) -> Provenance {
    Provenance {
        config_hash: exp.cfg.hash(),
        seed: exp.cfg.seed,
        version: format!("maprps {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Runs the sweep: `n_trials` trials, every `t0` of the grid, one point per `t0`.
pub fn run_sweep(exp: &Experiment, opts: &SweepOptions) -> Result<SweepResult, HarnessError> {
    let oracle = match &exp.fixed {
        Some((_, obs)) => exp.posterior_oracle(obs)?,
        None => None,
    };
    exp.stage2_prior_score(opts.jobs)?;
    let results = run_trials(exp, opts.jobs, oracle.as_ref());
    let n = results.len();
    let mut ok = Vec::with_capacity(n);
    let mut failed = 0;
    let mut first_error = None;
    for r in results {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => {
                failed += 1;
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    if failed * 100 > n || ok.is_empty() {
        return Err(HarnessError::TooManyFailures {
            failed,
            total: n,
            first: first_error.unwrap_or_default(),
        });
    }
    let reference = build_reference(exp, oracle.as_ref(), ok.len())?;
    let mut points = Vec::with_capacity(exp.cfg.t0_grid.len());
    let mut outputs = Vec::new();
    for (k, &t0) in exp.cfg.t0_grid.iter().enumerate() {
        let xs: Vec<DVector<f64>> = ok.iter().map(|o| o.outputs[k].clone()).collect();
        let ds: Vec<f64> = ok.iter().map(|o| o.distortions[k]).collect();
        let (distortion_mean, distortion_stderr) = match mean_stderr(&ds) {
            Ok((m, se)) => (m, Some(se)),
            Err(_) => (ds[0], None),
        };
        let (w2, w2_stderr) = perception(exp, &xs, &reference)?;
        points.push(DpCurvePoint {
            t0,
            distortion_mean,
            distortion_stderr,
            w2,
            w2_stderr: if ok.len() < 2 { None } else { w2_stderr },
            n_trials: ok.len(),
        });
        if opts.keep_outputs {
            outputs.push(xs);
        }
    }
    let ends = endpoints(exp, oracle.as_ref())?;
    let p_max = points.iter().map(|p| p.w2).fold(0.0, f64::max);
    Ok(SweepResult {
        ideal_curve: ends.as_ref().map(|e| sample_ideal_curve(e, p_max)).unwrap_or_default(),
        endpoints: ends,
        points,
        provenance: provenance(exp),
        failed_trials: failed,
        x_maps: if opts.keep_outputs { ok.iter().map(|o| o.x_map.clone()).collect() } else { Vec::new() },
        outputs,
    })
}
