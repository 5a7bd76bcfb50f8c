//! Experiment configuration: a JSON document, parsed strictly (unknown keys
//! are rejected) and validated before anything runs.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use maprps::latent::{make_codec, LinearCodec};
use maprps::linalg::randn;
use maprps::observation::{observe, ClipOperator, LikelihoodForm, LinearOperator, Observation, Operator};
use maprps::posterior::{gm_posterior, grid_posterior_stats};
use maprps::prior::{GaussianMixture, GridPrior, Lattice, Prior, DEFAULT_BOUNDS, DEFAULT_POINTS_1D, DEFAULT_POINTS_2D};
use maprps::rng::{stream, tag};
use maprps::score::{exact_prior_weight, GridScore, Jacobian, MixtureScore, ScoreModel};
use maprps::solver::{Init, Optimizer, Stage1Config, Stage2Config, DEFAULT_LATENT_T1, DEFAULT_T1};
use maprps::Schedule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Core(#[from] maprps::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorSection {
    Gm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    Grid {
        formula: GridFormula,
        #[serde(default = "one")]
        dim: usize,
        #[serde(default = "default_bounds")]
        bounds: [f64; 2],
        #[serde(default)]
        points: Option<usize>,
        /// Mean and variance of the `gaussian` formula.
        #[serde(default)]
        mean: f64,
        #[serde(default = "one_f")]
        var: f64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum GridFormula {
    Quartic,
    Gaussian,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_bounds() -> [f64; 2] {
    [DEFAULT_BOUNDS.0, DEFAULT_BOUNDS.1]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Mask,
    Downsample,
    Randproj,
    Clip,
    Dense,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum FormSection {
    #[default]
    Squared,
    L2norm,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub task: Task,
    pub sigma_y: f64,
    #[serde(default)]
    pub likelihood: FormSection,
    /// `mask`: kept coordinates.
    #[serde(default)]
    pub keep: Option<Vec<usize>>,
    /// `downsample`: block size.
    #[serde(default)]
    pub factor: Option<usize>,
    /// `randproj`: number of measurements.
    #[serde(default)]
    pub m: Option<usize>,
    /// `clip`: saturation level.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// `dense`: operator rows.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Conditional mode: the fixed observation.
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    /// Conditional mode: the fixed ground truth (drawn from the prior when absent).
    #[serde(default)]
    pub x_true: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Linear-beta schedule, written `{"type": "linear", "T": 1000, ...}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "type", default)]
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum WeightSection {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum InitSection {
    Named(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerSection {
    Adam,
    Plain,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub iterations: usize,
    pub eta0: f64,
    pub eta_min: f64,
    pub w: WeightSection,
    /// Defaults to 10, or 50 when a latent codec is configured.
    pub t1: Option<usize>,
    pub init: InitSection,
    pub optimizer: OptimizerSection,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_samples: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = Stage1Config::default();
        Self {
            iterations: d.iterations,
            eta0: d.eta0,
            eta_min: d.eta_min,
            w: WeightSection::Named("auto".into()),
            t1: None,
            init: InitSection::Named("pseudoinverse".into()),
            optimizer: OptimizerSection::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_samples: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub stride: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    #[default]
    Exact,
    Dps,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum JacobianSection {
    #[default]
    Full,
    Stopgrad,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub score: ScoreKind,
    pub xi: f64,
    pub jacobian: JacobianSection,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            score: ScoreKind::Exact,
            xi: 1.0,
            jacobian: JacobianSection::Full,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LatentSection {
    /// Data dimension.
    pub n_x: usize,
    /// Latent dimension (the prior's dimension).
    pub d: usize,
    #[serde(default = "one_f")]
    pub scale: f64,
    /// Seeds a standard-normal decoder offset; zero offset when absent.
    #[serde(default)]
    pub offset_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fresh `(x, y)` per trial; W2 against the prior.
    #[default]
    Marginal,
    /// One fixed `y` for all trials; W2 against the posterior.
    Conditional,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorSection {
    #[default]
    Auto,
    Gaussian,
    Quantile,
    Assign,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionSection {
    pub estimator: EstimatorSection,
    /// Samples per assignment block.
    pub m: usize,
    pub reps: usize,
    /// Reference samples per output sample for the quantile estimator.
    pub reference_factor: usize,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self {
            estimator: EstimatorSection::Auto,
            m: 1024,
            reps: 8,
            reference_factor: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: Option<String>,
    pub svg: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Any of `prior_gradient`, `stage1`, `map_bound`, `monotone`, `bound`, `stage2_oracle`.
    pub checks: Vec<String>,
    /// Multiplies the exact prior-gradient weight (2 gives the negative control).
    pub prior_weight_scale: f64,
    pub t1_values: Vec<usize>,
    pub draws: usize,
    pub stage1_instances: usize,
    /// Replaces the measured one-sided Lipschitz constant.
    pub lipschitz_override: Option<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: vec!["prior_gradient".into(), "stage1".into(), "map_bound".into()],
            prior_weight_scale: 1.0,
            t1_values: vec![10, 50, 200],
            draws: 100_000,
            stage1_instances: 10,
            lipschitz_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PriorSection,
    pub observation: ObservationSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    pub t0_grid: Vec<usize>,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub latent: Option<LatentSection>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub perception: PerceptionSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical (re-serialized) document.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything a run needs, resolved from a validated config.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub schedule: Schedule,
    /// Prior in working coordinates (latent coordinates when a codec is set).
    pub prior: Prior,
    pub codec: Option<LinearCodec>,
    /// Data-space operator.
    pub operator: Operator,
    pub form: LikelihoodForm,
    pub stage1: Stage1Config,
    /// Prior score in working coordinates for Stage 1 (grid priors: the `t1` table only).
    pub prior_score: Arc<dyn ScoreModel>,
    /// Stage-2 prior score, built on first use (see [`Experiment::stage2_prior_score`]).
    stage2_prior: OnceLock<Arc<dyn ScoreModel>>,
    /// Conditional mode: ground truth and observation (data space).
    pub fixed: Option<(DVector<f64>, Observation)>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return invalid(format!("{what} must be a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn build_prior(section: &PriorSection) -> Result<Prior, ConfigError> {
    match section {
        PriorSection::Gm { weights, means, covs } => {
            if means.len() != weights.len() || covs.len() != weights.len() {
                return invalid("gm prior needs one mean and one covariance per weight");
            }
            let means = means.iter().map(|m| DVector::from_column_slice(m)).collect();
            let covs: Result<Vec<_>, _> = covs.iter().map(|c| matrix_from_rows(c, "covariance")).collect();
            Ok(Prior::Mixture(GaussianMixture::new(weights.clone(), means, covs?)?))
        }
        PriorSection::Grid {
            formula,
            dim,
            bounds,
            points,
            mean,
            var,
        } => {
            let default_points = if *dim == 1 { DEFAULT_POINTS_1D } else { DEFAULT_POINTS_2D };
            let lat = Lattice::new(bounds[0], bounds[1], points.unwrap_or(default_points))?;
            Ok(Prior::Grid(match formula {
                GridFormula::Quartic => GridPrior::quartic(*dim, lat)?,
                GridFormula::Gaussian => GridPrior::gaussian(*dim, lat, *mean, *var)?,
            }))
        }
    }
}

fn build_operator(section: &ObservationSection, n: usize, seed: u64) -> Result<Operator, ConfigError> {
    fn need<T>(v: Option<T>, task: Task, key: &str) -> Result<T, ConfigError> {
        v.ok_or_else(|| ConfigError::Invalid(format!("task {task:?} needs `{key}`")))
    }
    Ok(match section.task {
        Task::Denoise => LinearOperator::identity(n).into(),
        Task::Mask => LinearOperator::mask(n, need(section.keep.clone(), section.task, "keep")?)?.into(),
        Task::Downsample => LinearOperator::downsample(n, need(section.factor, section.task, "factor")?)?.into(),
        Task::Randproj => {
            let m = need(section.m, section.task, "m")?;
            LinearOperator::random_projection(m, n, &mut stream(seed, tag::OPERATOR, 0, 0))?.into()
        }
        Task::Clip => ClipOperator::new(n, section.threshold.unwrap_or(1.0))?.into(),
        Task::Dense => {
            let a = matrix_from_rows(need(section.matrix.as_ref(), section.task, "matrix")?, "matrix")?;
            if a.ncols() != n {
                return invalid(format!("dense matrix has {} columns, data dimension is {n}", a.ncols()));
            }
            LinearOperator::dense(a)?.into()
        }
    })
}

/// Average isotropic variance `tr(cov) / n` of the prior.
fn isotropic_variance(prior: &Prior) -> Result<f64, ConfigError> {
    match prior {
        Prior::Mixture(p) => Ok(p.covariance().trace() / p.dim() as f64),
        Prior::Grid(g) => {
            // posterior under an uninformative observation is the prior itself
            let stats = grid_posterior_stats(
                g,
                &Observation::new(
                    DVector::zeros(g.dim()),
                    LinearOperator::identity(g.dim()).into(),
                    1e150,
                    LikelihoodForm::Squared,
                )?,
            )?;
            Ok(stats.d_star / g.dim() as f64)
        }
    }
}

impl Experiment {
    pub fn build(cfg: ExperimentConfig) -> Result<Self, ConfigError> {
        let s = &cfg.schedule;
        let schedule = Schedule::linear(s.num_steps, s.beta_min, s.beta_max)?;
        if cfg.n_trials == 0 {
            return invalid("n_trials must be >= 1");
        }
        if cfg.t0_grid.is_empty() {
            return invalid("t0_grid must not be empty");
        }
        if let Some(t) = cfg.t0_grid.iter().find(|t| **t > schedule.num_steps()) {
            return invalid(format!("t0 = {t} exceeds the schedule length {}", schedule.num_steps()));
        }
        if cfg.stage2.stride == 0 {
            return invalid("stage2.stride must be >= 1");
        }
        let prior = build_prior(&cfg.prior)?;
        let codec = match &cfg.latent {
            None => None,
            Some(l) => {
                if l.d != prior.dim() {
                    return invalid(format!("latent.d = {} but the prior has dimension {}", l.d, prior.dim()));
                }
                let c = make_codec(l.n_x, l.d, l.scale, &mut stream(cfg.seed, tag::CODEC, 0, 0))?;
                Some(match l.offset_seed {
                    Some(os) => c.with_offset(randn(&mut stream(os, tag::CODEC, 1, 0), l.n_x))?,
                    None => c,
                })
            }
        };
        if codec.is_some() && prior.as_mixture().is_none() {
            return invalid("the latent pipeline needs a gm prior");
        }
        let n_data = codec.as_ref().map_or(prior.dim(), |c| c.data_dim());
        let operator = build_operator(&cfg.observation, n_data, cfg.seed)?;
        let sigma_y = cfg.observation.sigma_y;
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return invalid("sigma_y must be finite and >= 0");
        }
        let form = match cfg.observation.likelihood {
            FormSection::Squared => LikelihoodForm::Squared,
            FormSection::L2norm => LikelihoodForm::L2Norm,
        };

        let st = &cfg.stage1;
        let t1 = st.t1.unwrap_or(if codec.is_some() { DEFAULT_LATENT_T1 } else { DEFAULT_T1 });
        let abar1 = schedule.alpha_bar(t1.min(schedule.num_steps()));
        let w = match &st.w {
            WeightSection::Value(v) => *v,
            WeightSection::Named(name) if name == "auto" => {
                if form != LikelihoodForm::Squared || sigma_y <= 0.0 {
                    return invalid("stage1.w = \"auto\" needs the squared likelihood and sigma_y > 0; give a number");
                }
                2.0 * sigma_y * sigma_y * exact_prior_weight(abar1, isotropic_variance(&prior)?)
            }
            WeightSection::Named(other) => return invalid(format!("stage1.w: unknown value {other:?}")),
        };
        let init = match &st.init {
            InitSection::Named(n) if n == "pseudoinverse" => Init::Pseudoinverse,
            InitSection::Named(n) if n == "zero" => Init::Zero,
            InitSection::Named(other) => return invalid(format!("stage1.init: unknown value {other:?}")),
            InitSection::Vector(v) => {
                if v.len() != prior.dim() {
                    return invalid("stage1.init vector has the wrong dimension");
                }
                Init::Custom(DVector::from_column_slice(v))
            }
        };
        let stage1 = Stage1Config {
            iterations: st.iterations,
            eta0: st.eta0,
            eta_min: st.eta_min,
            w,
            t1,
            init,
            optimizer: match st.optimizer {
                OptimizerSection::Adam => Optimizer::Adam {
                    beta1: st.beta1,
                    beta2: st.beta2,
                    epsilon: st.epsilon,
                },
                OptimizerSection::Plain => Optimizer::Plain,
            },
            grad_samples: st.grad_samples,
        };
        stage1.validate(&schedule)?;

        if cfg.score.score == ScoreKind::Exact {
            let linear = operator.as_linear().is_some();
            if prior.as_mixture().is_none() || !linear || sigma_y <= 0.0 {
                return invalid("score \"exact\" needs a gm prior, a linear operator and sigma_y > 0; use \"dps\"");
            }
        }
        if cfg.score.score == ScoreKind::Dps && codec.is_some() && operator.as_linear().is_none() {
            return invalid("the latent pipeline needs a linear operator");
        }
        if !(cfg.score.xi >= 0.0) {
            return invalid("score.xi must be >= 0");
        }
        if cfg.mode == Mode::Conditional {
            let oracle = match &prior {
                Prior::Mixture(_) => operator.as_linear().is_some() && sigma_y > 0.0,
                Prior::Grid(_) => sigma_y > 0.0,
            };
            if !oracle {
                return invalid("conditional mode needs a posterior oracle: sigma_y > 0 and, for gm priors, a linear operator");
            }
        }
        let p = &cfg.perception;
        if p.m < 2 || p.reps == 0 || p.reference_factor == 0 {
            return invalid("perception needs m >= 2, reps >= 1 and reference_factor >= 1");
        }

        let prior_score: Arc<dyn ScoreModel> = match &prior {
            Prior::Mixture(gm) => Arc::new(MixtureScore::new(gm.clone(), schedule.clone())),
            Prior::Grid(g) => Arc::new(GridScore::new(g, schedule.clone(), [stage1.t1])?),
        };

        let fixed = match cfg.mode {
            Mode::Marginal => None,
            Mode::Conditional => {
                let section = &cfg.observation;
                let x_true = match &section.x_true {
                    Some(v) if v.len() == n_data => DVector::from_column_slice(v),
                    Some(_) => return invalid("observation.x_true has the wrong dimension"),
                    None => {
                        let mut rng = stream(cfg.seed, tag::DATA, u64::MAX, 0);
                        let z = prior.sample(&mut rng);
                        codec.as_ref().map_or(z.clone(), |c| c.decode(&z))
                    }
                };
                let obs = match &section.y {
                    Some(y) => Observation::new(DVector::from_column_slice(y), operator.clone(), sigma_y, form)?,
                    None => {
                        let mut rng = stream(cfg.seed, tag::DATA, u64::MAX, 1);
                        let mut o = observe(&operator, sigma_y, &x_true, &mut rng)?;
                        o.form = form;
                        o
                    }
                };
                Some((x_true, obs))
            }
        };

        Ok(Self {
            cfg,
            schedule,
            prior,
            codec,
            operator,
            form,
            stage1,
            prior_score,
            stage2_prior: OnceLock::new(),
            fixed,
        })
    }

    /// Prior score used by the DPS posterior score in Stage 2. Grid priors need
    /// a table at every time the reverse chains visit; those are built once, on
    /// `jobs` threads, the first time this is called.
    pub fn stage2_prior_score(&self, jobs: usize) -> Result<Arc<dyn ScoreModel>, maprps::Error> {
        if let Some(score) = self.stage2_prior.get() {
            return Ok(Arc::clone(score));
        }
        let score: Arc<dyn ScoreModel> = match &self.prior {
            Prior::Grid(g) if self.cfg.score.score == ScoreKind::Dps => {
                let times = self.cfg.t0_grid.iter().flat_map(|&t0| {
                    Stage2Config {
                        t0,
                        stride: self.cfg.stage2.stride,
                    }
                    .step_grid()
                });
                Arc::new(GridScore::with_workers(g, self.schedule.clone(), times, jobs)?)
            }
            _ => Arc::clone(&self.prior_score),
        };
        Ok(Arc::clone(self.stage2_prior.get_or_init(|| score)))
    }

    pub fn data_dim(&self) -> usize {
        self.codec.as_ref().map_or(self.prior.dim(), |c| c.data_dim())
    }

    pub fn jacobian(&self) -> Jacobian {
        match self.cfg.score.jacobian {
            JacobianSection::Full => Jacobian::Full,
            JacobianSection::Stopgrad => Jacobian::StopGrad,
        }
    }

    /// The observation expressed on working coordinates: for a linear codec
    /// `y - A b` observed through `A W`; unchanged otherwise.
    pub fn working_observation(&self, obs: &Observation) -> Result<Observation, maprps::Error> {
        match (&self.codec, obs.operator.as_linear()) {
            (None, _) => Ok(obs.clone()),
            (Some(c), Some(a)) => {
                let aw = a.matrix() * c.decode_matrix();
                let y = &obs.y - a.apply(c.offset());
                Observation::new(y, LinearOperator::dense(aw)?.into(), obs.sigma_y, obs.form)
            }
            (Some(_), None) => Err(maprps::Error::UnsupportedOperator(
                "latent pipeline needs a linear operator".into(),
            )),
        }
    }

    /// Exact posterior (working coordinates) when the prior is a mixture and
    /// the observation is linear with `sigma_y > 0`.
    pub fn exact_posterior(&self, obs: &Observation) -> Option<GaussianMixture> {
        let gm = self.prior.as_mixture()?;
        let wobs = self.working_observation(obs).ok()?;
        gm_posterior(gm, &wobs).ok()
    }
}
