//! Acceptance suite: every criterion is checked at its stated tolerance and
//! wall-clock budget, and reports one PASS/FAIL line on stdout (written past
//! the test harness's output capture, so the lines always appear).
//!
//! Criteria run one at a time (a shared lock) so that wall-clock budgets are
//! not distorted by concurrently running tests.

use std::io::Write;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use maprps::metrics::{w2_assign_repeated, w2_gaussian, SampleSet};
use maprps::posterior::ideal_curve;
use maprps::prior::{strong_concavity_mu, GaussianMixture, Prior};
use maprps::rng::{stream, tag};
use maprps_harness::report::{csv_string, svg_string};
use maprps_harness::sweep::{w2_quantile, PosteriorLaw};
use maprps_harness::verify::{check_bound_and_oracle, check_map_bound, check_prior_gradient, check_stage1, posterior_lipschitz, Status};
use maprps_harness::{run_sweep, Experiment, ExperimentConfig, SweepOptions, SweepResult};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line and returns whether both the check and the budget passed.
fn report(name: &str, ok: bool, elapsed: Duration, budget_s: f64, detail: &str) -> bool {
    let in_time = elapsed.as_secs_f64() <= budget_s;
    let pass = ok && in_time;
    let line = format!(
        "ACCEPTANCE {} {name}: {detail} [time {:.1}s / {budget_s}s{}]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        if in_time { "" } else { " over budget" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn experiment(v: Value) -> Experiment {
    Experiment::build(ExperimentConfig::from_json(&v.to_string()).expect("config parses")).expect("config validates")
}

fn t0_grid() -> Vec<usize> {
    (0..=10).map(|k| 100 * k).collect()
}

fn gaussian_prior(n: usize, mean: f64, var: f64) -> Value {
    let covs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { var } else { 0.0 }).collect()).collect();
    json!({"type": "gm", "weights": [1.0], "means": [vec![mean; n]], "covs": [covs]})
}

fn sweep(exp: &Experiment, keep: bool) -> SweepResult {
    run_sweep(exp, &SweepOptions { jobs: 1, keep_outputs: keep }).expect("sweep runs")
}

#[test]
fn gaussian_stage1_exactness() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut total = 0;
    let mut combo = 0u64;
    for n in [1usize, 8] {
        let ops = [
            json!({"task": "denoise"}),
            json!({"task": "mask", "keep": (0..n).step_by(2).collect::<Vec<_>>()}),
            json!({"task": "randproj", "m": n.div_ceil(2)}),
        ];
        for op in ops {
            for sigma in [0.3, 1.0] {
                let mut obs = op.clone();
                obs["sigma_y"] = json!(sigma);
                let instances = if combo < 2 { 5 } else { 4 };
                let exp = experiment(json!({
                    "prior": gaussian_prior(n, 0.5, 1.0),
                    "observation": obs,
                    "stage1": {"iterations": 500},
                    "t0_grid": [0],
                    "n_trials": 1,
                    "seed": 100 + combo,
                    "verify": {"stage1_instances": instances}
                }));
                let c = check_stage1(&exp);
                assert_ne!(c.status, Status::NotApplicable);
                worst = worst.max(c.measured);
                total += instances;
                combo += 1;
            }
        }
    }
    let ok = worst <= 1e-2 && total == 50;
    let pass = report(
        "gaussian_stage1_exactness",
        ok,
        start.elapsed(),
        5.0,
        &format!("max ||x_map - mean||/(1+||mean||) = {worst:.3e} over {total} instances (tol 1e-2)"),
    );
    assert!(pass);
}

#[test]
fn prior_gradient_identity() {
    let _g = serial();
    let start = Instant::now();
    let exp = experiment(json!({
        "prior": gaussian_prior(1, 0.0, 1.0),
        "observation": {"task": "denoise", "sigma_y": 1.0},
        "t0_grid": [0],
        "n_trials": 1,
        "seed": 2,
        "verify": {"t1_values": [10, 50, 200], "draws": 100000}
    }));
    let c = check_prior_gradient(&exp);
    let pass = report(
        "prior_gradient_identity",
        c.status == Status::Pass,
        start.elapsed(),
        2.0,
        &format!("max |mean + x| / stderr = {:.2} (tol 3) at x in {{-1, 0, 2}}, t1 in {{10, 50, 200}}, 1e5 draws", c.measured),
    );
    assert!(pass);
}

#[test]
fn map_mmse_gap_on_quartic_prior() {
    let _g = serial();
    let start = Instant::now();
    let exp = experiment(json!({
        "prior": {"type": "grid", "formula": "quartic"},
        "observation": {"task": "denoise", "sigma_y": 1.0, "y": [1.5], "x_true": [1.5]},
        "mode": "conditional",
        "score": {"score": "dps"},
        "stage1": {"t1": 10},
        "t0_grid": [0],
        "n_trials": 1,
        "seed": 3
    }));
    let Prior::Grid(g) = &exp.prior else { unreachable!() };
    let prior_mu = strong_concavity_mu(&exp.prior, &DMatrix::zeros(1, 1)).unwrap();
    let (_, obs) = exp.fixed.clone().unwrap();
    let oracle = exp.posterior_oracle(&obs).unwrap().unwrap();
    let map = oracle.map.clone().unwrap();
    let gap = (&map - &oracle.mmse).norm();
    let post_mu = oracle.mu.unwrap();
    let problem = exp.trial_problem(0).unwrap();
    let x1 = exp.run_stage1(&problem, 0).unwrap().x_map;
    let solver_err = (&x1 - &map).norm();
    let ok = gap <= 1.0 && gap <= (1.0 / post_mu).sqrt() && solver_err <= 0.01 && (prior_mu - 1.0).abs() < 1e-2;
    let pass = report(
        "map_mmse_gap_on_quartic_prior",
        ok,
        start.elapsed(),
        10.0,
        &format!(
            "|MAP-MMSE| = {gap:.4} <= sqrt(1/mu) = 1 (prior mu {prior_mu:.4}; posterior mu {post_mu:.4} gives {:.4}); \
             |x_stage1 - MAP| = {solver_err:.2e} (tol 1e-2); {} lattice points",
            (1.0 / post_mu).sqrt(),
            g.lattice().points
        ),
    );
    assert!(pass);
}

fn gaussian_conditional() -> Experiment {
    experiment(json!({
        "prior": gaussian_prior(1, 0.0, 1.0),
        "observation": {"task": "denoise", "sigma_y": 1.0, "y": [1.0], "x_true": [0.8]},
        "mode": "conditional",
        "t0_grid": t0_grid(),
        "n_trials": 10000,
        "seed": 4
    }))
}

/// The Gaussian conditional sweep, shared with the bound-dominance criterion.
fn gaussian_conditional_sweep() -> &'static (Experiment, SweepResult) {
    static CELL: OnceLock<(Experiment, SweepResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let exp = gaussian_conditional();
        let r = sweep(&exp, true);
        (exp, r)
    })
}

fn largest_increase(r: &SweepResult) -> f64 {
    r.points.windows(2).map(|w| w[1].w2 - w[0].w2).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn w2_decreases_with_renoising_time() {
    let _g = serial();
    let start = Instant::now();
    let (gexp, gres) = gaussian_conditional_sweep();
    let g_slack = 0.02 * gres.endpoints.unwrap().p_star;
    let g_inc = largest_increase(gres);
    let oracle = check_bound_and_oracle(gexp, gres, posterior_lipschitz(gexp).unwrap())
        .into_iter()
        .find(|c| c.name == "stage2_oracle")
        .unwrap();

    let mexp = experiment(json!({
        "prior": {"type": "gm", "weights": [0.5, 0.5], "means": [[-2.0], [2.0]], "covs": [[[0.5]], [[0.5]]]},
        "observation": {"task": "denoise", "sigma_y": 1.0, "y": [0.5], "x_true": [1.0]},
        "mode": "conditional",
        "t0_grid": t0_grid(),
        "n_trials": 10000,
        "seed": 4
    }));
    let mres = sweep(&mexp, false);
    let m_slack = 0.02 * mres.endpoints.unwrap().p_star;
    let m_inc = largest_increase(&mres);
    let ok = g_inc <= g_slack && m_inc <= m_slack && oracle.status == Status::Pass;
    let pass = report(
        "w2_decreases_with_renoising_time",
        ok,
        start.elapsed(),
        180.0,
        &format!(
            "largest W2 increase: gaussian {g_inc:.4} (slack {g_slack:.4}), mixture {m_inc:.4} (slack {m_slack:.4}); \
             moment-oracle relative error {:.3} (tol 0.02; {})",
            oracle.measured, oracle.detail
        ),
    );
    assert!(pass);
}

#[test]
fn closed_form_w2_bound_dominates() {
    let _g = serial();
    let start = Instant::now();
    let (exp, res) = gaussian_conditional_sweep();
    let cached = start.elapsed();
    let start = Instant::now();
    let l_s = posterior_lipschitz(exp).unwrap();
    let mu = exp.posterior_oracle(&exp.fixed.as_ref().unwrap().1).unwrap().unwrap().mu.unwrap();
    let mut violations = Vec::new();
    for p in &res.points {
        let b = maprps::solver::rps_w2_bound(exp.schedule.alpha_bar(p.t0), l_s, 1, mu, 0.0).unwrap();
        if p.w2 > b {
            violations.push(format!("t0={} W2={:.2e}>{b:.2e}", p.t0, p.w2));
        }
    }
    let detail = if violations.is_empty() {
        format!("bound >= measured W2 at all {} t0 (L_s {l_s:.3}, mu {mu:.3})", res.points.len())
    } else {
        format!("L_s {l_s:.3}, mu {mu:.3}; violations: {}", violations.join(", "))
    };
    let pass = report("closed_form_w2_bound_dominates", violations.is_empty(), start.elapsed() + cached, 180.0, &detail);
    assert!(pass);
}

#[test]
fn dp_endpoints_and_curve_shape() {
    let _g = serial();
    let start = Instant::now();
    let exp = experiment(json!({
        "prior": gaussian_prior(1, 0.0, 1.0),
        "observation": {"task": "denoise", "sigma_y": 1.0},
        "t0_grid": t0_grid(),
        "n_trials": 10000,
        "seed": 6
    }));
    let r = sweep(&exp, false);
    let e = r.endpoints.unwrap();
    let first = &r.points[0];
    let last = r.points.last().unwrap();
    let start_ok = (first.distortion_mean / 0.5 - 1.0).abs() <= 0.03 && (first.w2 / 0.293 - 1.0).abs() <= 0.10;
    let end_ok = (last.distortion_mean - 1.0).abs() <= 0.05 && last.w2 <= 0.03;
    let below = r
        .points
        .iter()
        .map(|p| ideal_curve(&e, p.w2) - 0.02 - p.distortion_mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let ok = start_ok && end_ok && below <= 0.0;
    let pass = report(
        "dp_endpoints_and_curve_shape",
        ok,
        start.elapsed(),
        300.0,
        &format!(
            "t0=0: (D, W2) = ({:.4}, {:.4}) vs (0.5, 0.293); t0=T: ({:.4}, {:.4}) vs (1.0, <=0.03); \
             max (ideal - 0.02 - D) = {below:.4} (must be <= 0)",
            first.distortion_mean, first.w2, last.distortion_mean, last.w2
        ),
    );
    assert!(pass);
}

#[test]
fn latent_bounds() {
    let _g = serial();
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for l_d in [1.0, 3.0] {
        let exp = experiment(json!({
            "prior": gaussian_prior(2, 0.0, 1.0),
            "observation": {"task": "mask", "keep": [0, 1, 2], "sigma_y": 0.5},
            "latent": {"n_x": 6, "d": 2, "scale": l_d, "offset_seed": 11},
            "mode": "conditional",
            "t0_grid": t0_grid(),
            "n_trials": 10000,
            "seed": 7
        }));
        let map = check_map_bound(&exp);
        let res = sweep(&exp, true);
        let l_s = posterior_lipschitz(&exp).unwrap();
        let bound = check_bound_and_oracle(&exp, &res, l_s).into_iter().find(|c| c.name == "bound").unwrap();
        ok &= map.status == Status::Pass && bound.status == Status::Pass;
        parts.push(format!(
            "L_D={l_d}: map error - bound = {:.3} (slack 0.02), W2 {} ({})",
            map.measured,
            if bound.status == Status::Pass { "within bound" } else { "exceeds bound" },
            bound.detail
        ));
    }
    let pass = report("latent_bounds", ok, start.elapsed(), 120.0, &parts.join("; "));
    assert!(pass);
}

#[test]
fn w2_estimator_calibration() {
    let _g = serial();
    let start = Instant::now();
    let mut worst_assign = 0.0f64;
    let mut parts = Vec::new();
    for d in [1usize, 2, 4] {
        let mu = DVector::from_fn(d, |_, _| 2.0 / (d as f64).sqrt());
        let sigma = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| if i % 2 == 0 { 1.5 } else { 0.5 }));
        let exact = w2_gaussian(&DVector::zeros(d), &DMatrix::identity(d, d), &mu, &sigma).unwrap();
        let p = GaussianMixture::standard(d);
        let q = GaussianMixture::gaussian(mu.clone(), sigma.clone()).unwrap();
        let mut rng = stream(8, tag::CHECK, d as u64, 0);
        let a: Vec<_> = (0..8 * 1024).map(|_| p.sample(&mut rng)).collect();
        let b: Vec<_> = (0..8 * 1024).map(|_| q.sample(&mut rng)).collect();
        let (est, _) = w2_assign_repeated(&SampleSet::from_vectors(&a).unwrap(), &SampleSet::from_vectors(&b).unwrap(), 1024, 8).unwrap();
        let rel = (est / exact - 1.0).abs();
        worst_assign = worst_assign.max(rel);
        parts.push(format!("d={d}: {est:.4} vs {exact:.4}"));
    }
    let p = GaussianMixture::standard(1);
    let q = GaussianMixture::gaussian(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 1.5)).unwrap();
    let exact = w2_gaussian(&p.component_mean(0).clone(), p.component_cov(0), q.component_mean(0), q.component_cov(0)).unwrap();
    let mut rng = stream(8, tag::CHECK, 99, 0);
    let mut xs: Vec<f64> = (0..4096).map(|_| p.sample(&mut rng)[0]).collect();
    let mut reference: Vec<f64> = (0..4096 * 100).map(|_| q.sample(&mut rng)[0]).collect();
    xs.sort_by(f64::total_cmp);
    reference.sort_by(f64::total_cmp);
    let est_q = w2_quantile(&xs, &reference);
    let rel_q = (est_q / exact - 1.0).abs();
    let ok = worst_assign <= 0.10 && rel_q <= 0.05;
    let pass = report(
        "w2_estimator_calibration",
        ok,
        start.elapsed(),
        30.0,
        &format!(
            "assignment m=1024 x8: {} (max rel err {worst_assign:.3}, tol 0.10); quantile m=4096: {est_q:.4} vs {exact:.4} (rel err {rel_q:.4}, tol 0.05)",
            parts.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn multimodal_traversal() {
    let _g = serial();
    let start = Instant::now();
    let exp = experiment(json!({
        "prior": {
            "type": "gm",
            "weights": [0.5, 0.5],
            "means": [[-1.5, -3.0], [1.5, 3.0]],
            "covs": [[[0.5, 0.0], [0.0, 0.5]], [[0.5, 0.0], [0.0, 0.5]]]
        },
        "observation": {"task": "mask", "keep": [0], "sigma_y": 0.5, "y": [0.5], "x_true": [1.0, 2.0]},
        "mode": "conditional",
        "t0_grid": [0, 800],
        "n_trials": 10000,
        "seed": 9
    }));
    let res = sweep(&exp, true);
    let oracle = exp.posterior_oracle(&exp.fixed.as_ref().unwrap().1).unwrap().unwrap();
    let PosteriorLaw::Mixture(post) = &oracle.law else { unreachable!() };
    let component = |x: &DVector<f64>| {
        let r = post.responsibilities(x);
        usize::from(r[1] > r[0])
    };
    let map_basin = component(oracle.map.as_ref().unwrap());
    let n = res.outputs[0].len() as f64;
    let at_map = res.outputs[0].iter().filter(|x| component(x) == map_basin).count() as f64 / n;
    let occupancy1 = res.outputs[1].iter().filter(|x| component(x) == 1).count() as f64 / n;
    let weight1 = post.weights()[1];
    let ok = at_map >= 0.95 && (occupancy1 - weight1).abs() <= 0.05;
    let pass = report(
        "multimodal_traversal",
        ok,
        start.elapsed(),
        180.0,
        &format!(
            "t0=0: {:.2}% in the MAP basin (need >= 95%); t0=800: occupancy ({:.4}, {:.4}) vs posterior weights ({:.4}, {weight1:.4}) (tol 0.05)",
            100.0 * at_map,
            1.0 - occupancy1,
            occupancy1,
            1.0 - weight1
        ),
    );
    assert!(pass);
}

#[test]
fn determinism_and_pipeline() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "prior": gaussian_prior(1, 0.0, 1.0),
        "observation": {"task": "denoise", "sigma_y": 1.0},
        "t0_grid": [0, 500, 1000],
        "n_trials": 200,
        "seed": 10,
        "verify": {"checks": ["prior_gradient"], "draws": 20000, "prior_weight_scale": 2.0}
    });
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let bin = env!("CARGO_BIN_EXE_maprps");
    let traverse = |out: &str| {
        let status = Command::new(bin)
            .args(["traverse", "--config", path.to_str().unwrap(), "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join(out).join("dp_curve.csv")).unwrap()
    };
    let a = traverse("a");
    let b = traverse("b");
    let identical = a == b && !a.is_empty();

    let exp = experiment(cfg.clone());
    let in_process = csv_string(&sweep(&exp, false).points);
    let same_as_cli = in_process.as_bytes() == a.as_slice();

    let negative = Command::new(bin).args(["verify", "--config", path.to_str().unwrap()]).output().unwrap();
    let negative_fails = negative.status.code() == Some(1);

    let svg = std::fs::read_to_string(dir.path().join("a").join("dp_curve.svg")).unwrap();
    let svg_ok = svg.matches("<circle").count() == 3 && svg.matches("<path").count() == 1 && svg.starts_with("<svg");
    let redrawn = svg_string(&maprps_harness::report::parse_csv(&in_process).unwrap(), &[]);
    let redraw_ok = redrawn.matches("<circle").count() == 3;

    let ok = identical && same_as_cli && negative_fails && svg_ok && redraw_ok;
    let pass = report(
        "determinism_and_pipeline",
        ok,
        start.elapsed(),
        10.0,
        &format!(
            "byte-identical CSV across runs: {identical}; CLI = in-process: {same_as_cli}; \
             verify exit under 2x mis-scaled prior gradient: {:?}; SVG 3 points + 1 curve: {svg_ok}",
            negative.status.code()
        ),
    );
    assert!(pass);
}
