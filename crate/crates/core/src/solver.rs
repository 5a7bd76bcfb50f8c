//! The two-stage pipeline: stochastic-gradient MAP estimation, then
//! re-noising the MAP point to time `t0` and integrating the reverse
//! posterior SDE back to zero with Euler-Maruyama.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::randn;
use crate::observation::Likelihood;
use crate::rng::{stream, tag};
use crate::schedule::Schedule;
use crate::score::{prior_grad_estimate, ScoreModel};

/// Prior-gradient time for pixel-space runs.
pub const DEFAULT_T1: usize = 10;
/// Prior-gradient time for latent-space runs.
pub const DEFAULT_LATENT_T1: usize = 50;

/// `eta_min + (eta0 - eta_min) (1 + cos(pi n / N)) / 2`.
pub fn cosine_lr(n: usize, total: usize, eta0: f64, eta_min: f64) -> f64 {
    let phase = std::f64::consts::PI * n as f64 / total.max(1) as f64;
    eta_min + 0.5 * (eta0 - eta_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Plain,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    #[default]
    Pseudoinverse,
    Zero,
    Custom(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub iterations: usize,
    pub eta0: f64,
    pub eta_min: f64,
    /// Weight of the prior-gradient term.
    pub w: f64,
    /// Time at which the prior score is queried.
    pub t1: usize,
    pub init: Init,
    pub optimizer: Optimizer,
    /// Noise draws averaged per prior-gradient estimate.
    pub grad_samples: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 500,
            eta0: 0.05,
            eta_min: 1e-5,
            w: 1.0,
            t1: DEFAULT_T1,
            init: Init::Pseudoinverse,
            optimizer: Optimizer::default(),
            grad_samples: 1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.iterations == 0 {
            return bad("stage 1 needs at least one iteration".into());
        }
        if !(self.eta_min > 0.0 && self.eta0 >= self.eta_min) {
            return bad(format!("need eta0 >= eta_min > 0, got {} and {}", self.eta0, self.eta_min));
        }
        if !(self.w > 0.0) {
            return bad(format!("prior weight w = {} must be > 0", self.w));
        }
        if self.t1 == 0 || self.t1 >= schedule.num_steps() {
            return bad(format!("t1 = {} must lie strictly inside (0, {})", self.t1, schedule.num_steps()));
        }
        if self.grad_samples == 0 {
            return bad("grad_samples must be >= 1".into());
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return bad("adaptive-moment parameters out of range".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Config {
    pub t0: usize,
    /// Grid spacing of the reverse integration; 1 visits every schedule index.
    pub stride: usize,
}

impl Stage2Config {
    pub fn new(t0: usize) -> Self {
        Self { t0, stride: 1 }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.t0 > schedule.num_steps() {
            return Err(Error::TimeOutOfRange {
                t: self.t0 as f64,
                max: schedule.num_steps() as f64,
            });
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Descending times `t0, t0 - stride, ..., 0`.
    pub fn step_grid(&self) -> Vec<usize> {
        let mut grid: Vec<usize> = (0..=self.t0).rev().step_by(self.stride.max(1)).collect();
        if grid.last() != Some(&0) {
            grid.push(0);
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub x_map: DVector<f64>,
    /// Objective after each iteration (length = iterations).
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub x_map: DVector<f64>,
    pub x_final: DVector<f64>,
    pub stage1_objective_trace: Vec<f64>,
    pub seed: u64,
}

/// Stage 1: ascent on `loglik_grad + prior_grad_estimate` with a cosine step
/// schedule. `objective` (for example the exact log-posterior) is evaluated
/// after every iteration to fill the trace; without it the trace holds the
/// data term reported by the likelihood.
pub fn map_stage<R: Rng + ?Sized>(
    lik: &dyn Likelihood,
    prior: &dyn ScoreModel,
    cfg: &Stage1Config,
    objective: Option<&dyn Fn(&DVector<f64>) -> f64>,
    rng: &mut R,
) -> Result<Stage1Output> {
    cfg.validate(prior.schedule())?;
    let n = lik.dim();
    if prior.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prior.dim(),
        });
    }
    let mut x = match &cfg.init {
        Init::Pseudoinverse => lik.init(),
        Init::Zero => DVector::zeros(n),
        Init::Custom(v) => v.clone(),
    };
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    let mut m = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let lik_g = lik.grad(&x);
        let mut prior_g = DVector::zeros(n);
        for _ in 0..cfg.grad_samples {
            prior_g += prior_grad_estimate(prior, &x, cfg.t1, cfg.w, rng)?;
        }
        prior_g /= cfg.grad_samples as f64;
        let g = &lik_g + &prior_g;
        let lr = cosine_lr(k, cfg.iterations, cfg.eta0, cfg.eta_min);
        match cfg.optimizer {
            Optimizer::Plain => x += &g * lr,
            Optimizer::Adam { beta1, beta2, epsilon } => {
                m = m * beta1 + &g * (1.0 - beta1);
                v = v * beta2 + g.map(|gi| gi * gi) * (1.0 - beta2);
                let c1 = 1.0 - beta1.powi(k as i32 + 1);
                let c2 = 1.0 - beta2.powi(k as i32 + 1);
                for i in 0..n {
                    x[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                }
            }
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::NonFinite {
                stage: "stage1",
                step: k,
                grad_norm: prior_g.norm(),
                lik_norm: lik_g.norm(),
            });
        }
        trace.push(match objective {
            Some(f) => f(&x),
            None => lik.log_lik(&x),
        });
    }
    Ok(Stage1Output { x_map: x, trace })
}

/// Stage 2: `x_{t0} ~ N(sqrt(abar_{t0}) x_map, (1 - abar_{t0}) I)`, then one
/// Euler-Maruyama step per grid interval `t -> t'`:
/// `x' = (1 + lambda/2) x + lambda score(x, t) + sqrt(lambda) eps` with
/// `lambda = log abar_{t'} - log abar_t`.
pub fn rps_stage<R: Rng + ?Sized>(
    x_map: &DVector<f64>,
    score: &dyn ScoreModel,
    cfg: &Stage2Config,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let s = score.schedule();
    cfg.validate(s)?;
    if cfg.t0 == 0 {
        return Ok(x_map.clone());
    }
    let n = x_map.len();
    let abar0 = s.alpha_bar(cfg.t0);
    let mut x = x_map * abar0.sqrt() + randn(rng, n) * (1.0 - abar0).sqrt();
    let grid = cfg.step_grid();
    for (k, w) in grid.windows(2).enumerate() {
        let (from, to) = (w[0], w[1]);
        let lambda = s.interval_rate(from, to);
        let sc = score.score(&x, from)?;
        x = &x * (1.0 + 0.5 * lambda) + &sc * lambda + randn(rng, n) * lambda.sqrt();
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::NonFinite {
                stage: "stage2",
                step: k,
                grad_norm: sc.norm(),
                lik_norm: f64::NAN,
            });
        }
    }
    Ok(x)
}

/// Both stages with streams derived from `seed`.
pub fn map_rps(
    lik: &dyn Likelihood,
    prior: &dyn ScoreModel,
    posterior: &dyn ScoreModel,
    cfg1: &Stage1Config,
    cfg2: &Stage2Config,
    seed: u64,
) -> Result<RunRecord> {
    let s1 = map_stage(lik, prior, cfg1, None, &mut stream(seed, tag::STAGE1, 0, 0))?;
    let x_final = rps_stage(&s1.x_map, posterior, cfg2, &mut stream(seed, tag::STAGE2, 0, 0))?;
    Ok(RunRecord {
        x_map: s1.x_map,
        x_final,
        stage1_objective_trace: s1.trace,
        seed,
    })
}

/// Upper bound on the W2 distance between the re-noised sampler's output and
/// the posterior: `abar_{t0}^{1 - L_s} sqrt(2 n_x / mu) + eps_score`.
pub fn rps_w2_bound(alpha_bar_t0: f64, l_s: f64, n_x: usize, mu: f64, eps_score: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu = {mu} must be > 0")));
    }
    Ok(alpha_bar_t0.powf(1.0 - l_s) * (2.0 * n_x as f64 / mu).sqrt() + eps_score)
}

/// Bound on `||MAP - MMSE||` for a `mu`-strongly log-concave posterior: `sqrt(n_x / mu)`.
pub fn map_mmse_bound(n_x: usize, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu = {mu} must be > 0")));
    }
    Ok((n_x as f64 / mu).sqrt())
}
