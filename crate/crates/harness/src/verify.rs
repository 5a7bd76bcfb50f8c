//! Checks of the algorithm against exact oracles, selected by `verify.checks`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use maprps::latent::{latent_map_error_bound, latent_rps_w2_bound};
use maprps::linalg::{max_eigenvalue, mean_cov, symmetrize};
use maprps::metrics::{gaussian_stage2_oracle, w2_gaussian};
use maprps::posterior::GaussianPosterior;
use maprps::rng::{stream, tag};
use maprps::score::{exact_prior_weight, one_sided_lipschitz, prior_grad_estimate};
use maprps::solver::{map_mmse_bound, rps_w2_bound, Stage2Config};

use crate::config::{Experiment, Mode, ScoreKind};
use crate::sweep::{run_sweep, PosteriorLaw, SweepOptions, SweepResult};
use crate::HarnessError;

/// Points evaluated by the prior-gradient check (each coordinate set to the value).
pub const GRADIENT_POINTS: [f64; 3] = [-1.0, 0.0, 2.0];
/// Standard errors allowed between the Monte-Carlo mean and the exact gradient.
pub const GRADIENT_SIGMAS: f64 = 3.0;
/// Relative Stage-1 tolerance against the Gaussian posterior mean.
pub const STAGE1_GAUSSIAN_TOL: f64 = 1e-2;
/// Absolute Stage-1 tolerance against a non-Gaussian posterior mode.
pub const STAGE1_MODE_TOL: f64 = 1e-2;
/// Optimizer slack added to the MAP-MMSE bound; doubled for the latent bound.
pub const MAP_BOUND_SLACK: f64 = 1e-2;
/// Per-step slack on the W2 sequence, relative to `P*`.
pub const MONOTONE_SLACK: f64 = 0.02;
/// Relative tolerance of the measured W2 against the moment oracle.
pub const ORACLE_REL_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotApplicable => "N/A ",
        };
        write!(
            f,
            "{s} {:<16} measured={:.6e} bound={:.6e} tol={:.3e}  {}",
            self.name, self.measured, self.bound, self.tolerance, self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn not_applicable(name: &str, why: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        status: Status::NotApplicable,
        measured: f64::NAN,
        bound: f64::NAN,
        tolerance: f64::NAN,
        detail: why.into(),
    }
}

fn judged(name: &str, ok: bool, measured: f64, bound: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        status: if ok { Status::Pass } else { Status::Fail },
        measured,
        bound,
        tolerance,
        detail,
    }
}

/// Monte-Carlo mean of the prior-gradient estimator against the exact
/// gradient of an isotropic Gaussian prior, at several `t1` and points.
pub fn check_prior_gradient(exp: &Experiment) -> CheckResult {
    const NAME: &str = "prior_gradient";
    let gm = match exp.prior.as_mixture() {
        Some(g) if g.is_gaussian() => g,
        _ => return not_applicable(NAME, "needs a single-Gaussian prior"),
    };
    let n = gm.dim();
    let cov = gm.component_cov(0);
    let sigma2 = cov[(0, 0)];
    if (cov - DMatrix::identity(n, n) * sigma2).amax() > 1e-12 * sigma2 {
        return not_applicable(NAME, "needs an isotropic prior covariance");
    }
    let v = &exp.cfg.verify;
    if v.draws < 2 {
        return not_applicable(NAME, "needs at least two draws");
    }
    let mean = gm.component_mean(0);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for &t1 in &v.t1_values {
        if t1 == 0 || t1 >= exp.schedule.num_steps() {
            return judged(NAME, false, f64::NAN, GRADIENT_SIGMAS, 0.0, format!("t1 = {t1} outside (0, T)"));
        }
        let w = v.prior_weight_scale * exact_prior_weight(exp.schedule.alpha_bar(t1), sigma2);
        for (k, &xv) in GRADIENT_POINTS.iter().enumerate() {
            let x = DVector::from_element(n, xv);
            let target = -(&x - mean) / sigma2;
            let mut rng = stream(exp.cfg.seed, tag::CHECK, t1 as u64, k as u64);
            let mut sum = DVector::zeros(n);
            let mut sq = DVector::zeros(n);
            for _ in 0..v.draws {
                let g = match prior_grad_estimate(exp.prior_score.as_ref(), &x, t1, w, &mut rng) {
                    Ok(g) => g,
                    Err(e) => return judged(NAME, false, f64::NAN, GRADIENT_SIGMAS, 0.0, e.to_string()),
                };
                sq += g.component_mul(&g);
                sum += g;
            }
            let d = v.draws as f64;
            for i in 0..n {
                let m = sum[i] / d;
                let var = ((sq[i] - d * m * m) / (d - 1.0)).max(0.0);
                let se = (var / d).sqrt().max(1e-300);
                let z = (m - target[i]).abs() / se;
                if z > worst {
                    worst = z;
                    worst_at = format!("t1={t1} x={xv} mean={m:.5} exact={:.5}", target[i]);
                }
            }
        }
    }
    judged(NAME, worst <= GRADIENT_SIGMAS, worst, GRADIENT_SIGMAS, 0.0, format!("max z-score; {worst_at}"))
}

fn instances(exp: &Experiment) -> usize {
    if exp.fixed.is_some() {
        1
    } else {
        exp.cfg.verify.stage1_instances
    }
}

/// Stage-1 output against the exact MAP point.
pub fn check_stage1(exp: &Experiment) -> CheckResult {
    const NAME: &str = "stage1";
    let gaussian = exp.prior.as_mixture().is_some_and(|g| g.is_gaussian());
    let mut worst = 0.0f64;
    for i in 0..instances(exp) {
        let run = || -> Result<Option<f64>, maprps::Error> {
            let problem = exp.trial_problem(i as u64)?;
            let Some(oracle) = exp.posterior_oracle(&problem.obs)? else {
                return Ok(None);
            };
            let x = exp.decode(&exp.run_stage1(&problem, i as u64)?.x_map);
            Ok(Some(if gaussian {
                (&x - &oracle.mmse).norm() / (1.0 + oracle.mmse.norm())
            } else {
                match &oracle.map {
                    Some(m) => (&x - m).norm(),
                    None => f64::INFINITY,
                }
            }))
        };
        match run() {
            Ok(Some(e)) => worst = worst.max(e),
            Ok(None) => return not_applicable(NAME, "no posterior oracle"),
            Err(e) => return judged(NAME, false, f64::NAN, 0.0, 0.0, e.to_string()),
        }
    }
    let (tol, what) = if gaussian {
        (STAGE1_GAUSSIAN_TOL, "relative error to the posterior mean")
    } else {
        (STAGE1_MODE_TOL, "distance to the posterior mode")
    };
    judged(NAME, worst <= tol, worst, 0.0, tol, format!("max {what} over {} instances", instances(exp)))
}

/// Distance between the MAP (exact and Stage-1) and the MMSE point against
/// the strong-log-concavity bound.
pub fn check_map_bound(exp: &Experiment) -> CheckResult {
    const NAME: &str = "map_bound";
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_exact = f64::NEG_INFINITY;
    let mut bound = f64::INFINITY;
    for i in 0..instances(exp) {
        let run = || -> Result<Option<(f64, f64, f64)>, maprps::Error> {
            let problem = exp.trial_problem(i as u64)?;
            let Some(oracle) = exp.posterior_oracle(&problem.obs)? else {
                return Ok(None);
            };
            let (Some(mu), Some(map)) = (oracle.mu, oracle.map.as_ref()) else {
                return Ok(None);
            };
            let b = match &exp.codec {
                Some(c) => latent_map_error_bound(c.latent_dim(), mu, c.lipschitz())?,
                None => map_mmse_bound(exp.data_dim(), mu)?,
            };
            let x = exp.decode(&exp.run_stage1(&problem, i as u64)?.x_map);
            Ok(Some(((&x - &oracle.mmse).norm(), (map - &oracle.mmse).norm(), b)))
        };
        match run() {
            Ok(Some((gap, exact, b))) => {
                worst_gap = worst_gap.max(gap - b);
                worst_exact = worst_exact.max(exact - b);
                bound = bound.min(b);
            }
            Ok(None) => return not_applicable(NAME, "needs a strongly log-concave posterior oracle"),
            Err(e) => return judged(NAME, false, f64::NAN, 0.0, 0.0, e.to_string()),
        }
    }
    let slack = if exp.codec.is_some() { 2.0 * MAP_BOUND_SLACK } else { MAP_BOUND_SLACK };
    judged(
        NAME,
        worst_gap <= slack && worst_exact <= 0.0,
        worst_gap,
        0.0,
        slack,
        format!("max (||x_stage1 - mmse|| - bound); exact mode excess {worst_exact:.3e}; tightest bound {bound:.4}"),
    )
}

/// One-sided Lipschitz constant of the posterior score over time: analytic
/// for a Gaussian posterior, sampled otherwise.
pub fn posterior_lipschitz(exp: &Experiment) -> Result<f64, maprps::Error> {
    if let Some(l) = exp.cfg.verify.lipschitz_override {
        return Ok(l);
    }
    let problem = exp.trial_problem(0)?;
    if let Some(o) = exp.posterior_oracle(&problem.obs)? {
        if let PosteriorLaw::Mixture(post) = &o.law {
            if post.is_gaussian() && exp.cfg.score.score == ScoreKind::Exact {
                // score_t(x) = -(abar C + (1 - abar) I)^{-1}(x - sqrt(abar) M): the
                // largest eigenvalue over t is -1 / max_t(abar c_max + 1 - abar)
                let c_max = max_eigenvalue(post.component_cov(0));
                let worst = (0..=exp.schedule.num_steps())
                    .map(|t| {
                        let a = exp.schedule.alpha_bar(t);
                        -1.0 / (a * c_max + 1.0 - a)
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                return Ok(worst);
            }
        }
    }
    let score = exp.posterior_score(&problem)?;
    let center = exp.run_stage1(&problem, 0)?.x_map;
    let mut rng = stream(exp.cfg.seed, tag::CHECK, u64::MAX, 0);
    let t_max = exp.schedule.num_steps();
    let mut worst = f64::NEG_INFINITY;
    for t in (0..=t_max).step_by((t_max / 20).max(1)) {
        worst = worst.max(one_sided_lipschitz(score.as_ref(), t, &center, 3.0, 64, &mut rng)?);
    }
    Ok(worst)
}

/// W2 non-increasing in `t0` (per-step slack `0.02 P*`), gated on `L_s < 1`.
pub fn check_monotone(exp: &Experiment, sweep: &SweepResult, l_s: f64) -> CheckResult {
    const NAME: &str = "monotone";
    if l_s >= 1.0 {
        return not_applicable(NAME, format!("monotone regime not applicable (L_s = {l_s:.3} >= 1)"));
    }
    let Some(ends) = sweep.endpoints else {
        return not_applicable(NAME, "needs P*");
    };
    let mut pts: Vec<_> = sweep.points.iter().collect();
    pts.sort_by_key(|p| p.t0);
    let slack = MONOTONE_SLACK * ends.p_star;
    let worst = pts.windows(2).map(|w| w[1].w2 - w[0].w2).fold(f64::NEG_INFINITY, f64::max);
    let what = if exp.cfg.mode == Mode::Conditional { "posterior" } else { "prior" };
    judged(
        NAME,
        worst <= slack,
        worst,
        0.0,
        slack,
        format!("largest W2 increase between consecutive t0 ({what} reference), L_s = {l_s:.3}"),
    )
}

/// Mean and covariance of the pooled Stage-2 output over trials, from the
/// moment recursion: the chain is affine in `x_map`, so the pooled law is
/// Gaussian with the spread of the Stage-1 outputs pushed through it.
fn pooled_oracle(
    post: &GaussianPosterior,
    exp: &Experiment,
    t0: usize,
    x_maps: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>), maprps::Error> {
    let grid = Stage2Config {
        t0,
        stride: exp.cfg.stage2.stride,
    }
    .step_grid();
    let n = post.mean.len();
    let (xm, xc) = mean_cov(x_maps);
    let (m0, c0) = gaussian_stage2_oracle(post, &exp.schedule, &DVector::zeros(n), &grid)?;
    let (mean, _) = gaussian_stage2_oracle(post, &exp.schedule, &xm, &grid)?;
    let mut gain = DMatrix::zeros(n, n);
    for i in 0..n {
        let (mi, _) = gaussian_stage2_oracle(post, &exp.schedule, &DVector::from_fn(n, |k, _| f64::from(k == i)), &grid)?;
        gain.set_column(i, &(mi - &m0));
    }
    let cov = symmetrize(&(c0 + &gain * xc * gain.transpose()));
    Ok(match &exp.codec {
        Some(c) => {
            let w = c.decode_matrix();
            (c.decode(&mean), symmetrize(&(w * cov * w.transpose())))
        }
        None => (mean, cov),
    })
}

/// Closed-form bound on the posterior W2 at every `t0`, plus the moment-oracle
/// match; both need a Gaussian posterior, the exact score and conditional mode.
pub fn check_bound_and_oracle(exp: &Experiment, sweep: &SweepResult, l_s: f64) -> Vec<CheckResult> {
    let applicable = exp.cfg.mode == Mode::Conditional
        && exp.cfg.score.score == ScoreKind::Exact
        && exp.prior.as_mixture().is_some_and(|g| g.is_gaussian());
    if !applicable {
        let why = "needs conditional mode, a Gaussian prior and the exact score";
        return vec![not_applicable("bound", why), not_applicable("stage2_oracle", why)];
    }
    let run = || -> Result<Vec<CheckResult>, maprps::Error> {
        let problem = exp.trial_problem(0)?;
        let oracle = exp
            .posterior_oracle(&problem.obs)?
            .ok_or_else(|| maprps::Error::InvalidParameter("no posterior oracle".into()))?;
        let PosteriorLaw::Mixture(post_gm) = &oracle.law else {
            return Err(maprps::Error::InvalidParameter("expected a Gaussian posterior".into()));
        };
        let post = GaussianPosterior {
            mean: post_gm.component_mean(0).clone(),
            cov: post_gm.component_cov(0).clone(),
        };
        let mu = oracle.mu.ok_or_else(|| maprps::Error::InvalidParameter("posterior has no mu".into()))?;
        let (ref_mean, ref_cov) = match &exp.codec {
            Some(c) => {
                let w = c.decode_matrix();
                (c.decode(&post.mean), symmetrize(&(w * &post.cov * w.transpose())))
            }
            None => (post.mean.clone(), post.cov.clone()),
        };
        let x_maps: Vec<DVector<f64>> = match sweep.x_maps.is_empty() {
            false => sweep.x_maps.iter().map(|x| exp.codec.as_ref().map_or_else(|| x.clone(), |c| c.encode(x))).collect(),
            true => vec![exp.run_stage1(&problem, 0)?.x_map],
        };
        let mut bound_excess = f64::NEG_INFINITY;
        let mut bound_at = String::new();
        let mut rel_worst = 0.0f64;
        let mut rel_at = String::new();
        for p in &sweep.points {
            let abar = exp.schedule.alpha_bar(p.t0);
            let b = match &exp.codec {
                Some(c) => latent_rps_w2_bound(abar, l_s, c.latent_dim(), mu, c.lipschitz(), 0.0)?,
                None => rps_w2_bound(abar, l_s, exp.data_dim(), mu, 0.0)?,
            };
            if p.w2 - b > bound_excess {
                bound_excess = p.w2 - b;
                bound_at = format!("t0={} measured={:.4e} bound={b:.4e}", p.t0, p.w2);
            }
            let (m, c) = pooled_oracle(&post, exp, p.t0, &x_maps)?;
            let w_oracle = w2_gaussian(&m, &c, &ref_mean, &ref_cov)?;
            let rel = (p.w2 - w_oracle).abs() / w_oracle.max(1e-300);
            if rel > rel_worst {
                rel_worst = rel;
                rel_at = format!("t0={} measured={:.4e} oracle={w_oracle:.4e}", p.t0, p.w2);
            }
        }
        Ok(vec![
            judged(
                "bound",
                bound_excess <= 0.0,
                bound_excess,
                0.0,
                0.0,
                format!("max (measured W2 - bound), L_s = {l_s:.3}, mu = {mu:.3}; worst {bound_at}"),
            ),
            judged(
                "stage2_oracle",
                rel_worst <= ORACLE_REL_TOL,
                rel_worst,
                0.0,
                ORACLE_REL_TOL,
                format!("max relative W2 error; worst {rel_at}"),
            ),
        ])
    };
    run().unwrap_or_else(|e| {
        vec![
            judged("bound", false, f64::NAN, 0.0, 0.0, e.to_string()),
            judged("stage2_oracle", false, f64::NAN, 0.0, 0.0, e.to_string()),
        ]
    })
}

pub const KNOWN_CHECKS: [&str; 6] = ["prior_gradient", "stage1", "map_bound", "monotone", "bound", "stage2_oracle"];

/// Runs the configured checks; sweep-based ones share one sweep.
pub fn verify(exp: &Experiment, jobs: usize) -> Result<VerifyReport, HarnessError> {
    let wanted = &exp.cfg.verify.checks;
    if let Some(bad) = wanted.iter().find(|c| !KNOWN_CHECKS.contains(&c.as_str())) {
        return Err(HarnessError::Config(crate::config::ConfigError::Invalid(format!(
            "unknown check {bad:?}; known: {}",
            KNOWN_CHECKS.join(", ")
        ))));
    }
    let has = |c: &str| wanted.iter().any(|w| w == c);
    let mut report = VerifyReport::default();
    if has("prior_gradient") {
        report.checks.push(check_prior_gradient(exp));
    }
    if has("stage1") {
        report.checks.push(check_stage1(exp));
    }
    if has("map_bound") {
        report.checks.push(check_map_bound(exp));
    }
    if has("monotone") || has("bound") || has("stage2_oracle") {
        exp.stage2_prior_score(jobs)?;
        let l_s = posterior_lipschitz(exp)?;
        let gated = has("monotone") && l_s >= 1.0 && !has("bound") && !has("stage2_oracle");
        if gated {
            report.checks.push(check_monotone(exp, &empty_sweep(exp), l_s));
        } else {
            let sweep = run_sweep(
                exp,
                &SweepOptions {
                    jobs,
                    keep_outputs: true,
                },
            )?;
            if has("monotone") {
                report.checks.push(check_monotone(exp, &sweep, l_s));
            }
            for c in check_bound_and_oracle(exp, &sweep, l_s) {
                if has(&c.name) {
                    report.checks.push(c);
                }
            }
        }
    }
    Ok(report)
}

fn empty_sweep(exp: &Experiment) -> SweepResult {
    SweepResult {
        points: Vec::new(),
        endpoints: None,
        ideal_curve: Vec::new(),
        provenance: crate::sweep::provenance(exp),
        failed_trials: 0,
        outputs: Vec::new(),
        x_maps: Vec::new(),
    }
}
