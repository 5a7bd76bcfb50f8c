use maprps::linalg::{mean_cov, randn};
use maprps::metrics::gaussian_stage2_oracle;
use maprps::observation::{observe, pinv_init, LinearOperator, Operator};
use maprps::posterior::{gaussian_posterior, GaussianPosterior};
use maprps::prior::{strong_concavity_mu, GaussianMixture, Prior};
use maprps::score::{exact_prior_weight, MixtureScore};
use maprps::solver::{cosine_lr, map_mmse_bound, map_stage, rps_stage, rps_w2_bound, Stage1Config, Stage2Config};
use maprps::Schedule;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Prior-gradient weight that makes Stage 1 exact for an isotropic Gaussian
/// prior of variance `var` under the squared likelihood.
fn exact_w(s: &Schedule, cfg: &Stage1Config, sigma_y: f64, var: f64) -> f64 {
    2.0 * sigma_y * sigma_y * exact_prior_weight(s.alpha_bar(cfg.t1), var)
}

#[test]
fn stage2_moments_match_the_exact_recursion() {
    let s = Schedule::default_linear();
    let post = GaussianPosterior {
        mean: DVector::from_vec(vec![0.7, -0.4]),
        cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]),
    };
    let model = MixtureScore::new(post.to_mixture().unwrap(), s.clone());
    let x_map = DVector::from_vec(vec![1.2, 0.1]);
    let cfg = Stage2Config::new(300);
    let (mean, cov) = gaussian_stage2_oracle(&post, &s, &x_map, &cfg.step_grid()).unwrap();

    let runs = 100_000;
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let xs: Vec<DVector<f64>> = (0..runs).map(|_| rps_stage(&x_map, &model, &cfg, &mut rng).unwrap()).collect();
    let (m_hat, c_hat) = mean_cov(&xs);
    let n = runs as f64;
    for i in 0..2 {
        let se = (cov[(i, i)] / n).sqrt();
        assert!((m_hat[i] - mean[i]).abs() <= 3.0 * se, "mean[{i}]: {} vs {}", m_hat[i], mean[i]);
        for j in 0..2 {
            // Gaussian sampling variance of a covariance entry: (c_ii c_jj + c_ij^2) / n.
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            assert!((c_hat[(i, j)] - cov[(i, j)]).abs() <= 3.0 * se, "cov[{i},{j}]: {} vs {}", c_hat[(i, j)], cov[(i, j)]);
        }
    }
}

#[test]
fn stage1_objective_settles_monotonically() {
    let s = Schedule::default_linear();
    let var = 1.5;
    let prior = GaussianMixture::gaussian(DVector::from_vec(vec![0.5, -1.0, 0.2]), DMatrix::identity(3, 3) * var).unwrap();
    let model = MixtureScore::new(prior.clone(), s.clone());
    for (k, op) in [
        LinearOperator::identity(3),
        LinearOperator::mask(3, vec![0, 2]).unwrap(),
        LinearOperator::random_projection(2, 3, &mut ChaCha12Rng::seed_from_u64(3)).unwrap(),
    ]
    .into_iter()
    .enumerate()
    {
        let sigma = 0.5;
        let mut rng = ChaCha12Rng::seed_from_u64(40 + k as u64);
        let obs = observe(&Operator::Linear(op), sigma, &prior.sample(&mut rng), &mut rng).unwrap();
        let mut cfg = Stage1Config::default();
        cfg.w = exact_w(&s, &cfg, sigma, var);
        let log_post = |x: &DVector<f64>| prior.log_pdf(x) - obs.neg_log_lik(x).unwrap();
        let out = map_stage(&obs, &model, &cfg, Some(&log_post), &mut rng).unwrap();
        // A noisy step of length h from a point with gradient g lowers a quadratic
        // objective by at most |g| h + lambda_max h^2 / 2. Adaptive-moment steps
        // have h <= 3.2 lr sqrt(n) (bias-corrected moment ratio bound), and over the
        // last tenth of the run the gradient stays within twice its final size.
        let post = gaussian_posterior(&prior, &obs).unwrap();
        let precision = maprps::linalg::spd_inverse(&post.cov).unwrap();
        let lambda_max = maprps::linalg::max_eigenvalue(&precision);
        let g_final = (&precision * (&out.x_map - &post.mean)).norm();
        let start = cfg.iterations * 9 / 10;
        for i in start + 1..cfg.iterations {
            let h = 3.2 * cosine_lr(i, cfg.iterations, cfg.eta0, cfg.eta_min) * 3f64.sqrt();
            let resolution = 2.0 * g_final * h + 0.5 * lambda_max * h * h;
            let (before, after) = (out.trace[i - 1], out.trace[i]);
            assert!(after >= before - resolution, "case {k}: objective fell at step {i}: {before} -> {after} (resolution {resolution:.2e})");
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn stage1_lands_within_the_map_mmse_bound(
        n in 1usize..5,
        var in 0.3..3.0f64,
        sigma in 0.2..1.5f64,
        seed in any::<u64>(),
        kind in 0usize..3,
    ) {
        let s = Schedule::default_linear();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mean = randn(&mut rng, n);
        let prior = GaussianMixture::gaussian(mean, DMatrix::identity(n, n) * var).unwrap();
        let op = match kind {
            0 => LinearOperator::identity(n),
            1 => LinearOperator::mask(n, (0..n).step_by(2).collect()).unwrap(),
            _ => LinearOperator::random_projection(n.div_ceil(2), n, &mut rng).unwrap(),
        };
        let obs = observe(&Operator::Linear(op), sigma, &prior.sample(&mut rng), &mut rng).unwrap();
        let post = gaussian_posterior(&prior, &obs).unwrap();
        let mu = strong_concavity_mu(&Prior::Mixture(prior.clone()), &obs.likelihood_curvature().unwrap()).unwrap();
        let mut cfg = Stage1Config::default();
        cfg.w = exact_w(&s, &cfg, sigma, var);
        // Adam moves each coordinate by about the learning rate per step, so a cosine
        // schedule travels roughly N eta0 / 2 in total. A near-singular projection puts
        // the pseudoinverse start far out (36 units for a 1x1 entry of 0.064), beyond
        // the reach of the default 500 steps, so the budget is sized to cover four
        // times the starting distance.
        let reach = (pinv_init(&obs) - &post.mean).amax();
        cfg.iterations = cfg.iterations.max(2000).max((8.0 * reach / cfg.eta0).ceil() as usize);
        let out = map_stage(&obs, &MixtureScore::new(prior, s.clone()), &cfg, None, &mut rng).unwrap();
        let gap = (&out.x_map - &post.mean).norm();
        prop_assert!(gap <= map_mmse_bound(n, mu).unwrap() + 0.01);
        // For a Gaussian posterior MAP and MMSE coincide, so the optimizer alone sets the gap.
        prop_assert!(gap <= 0.01 * (1.0 + post.mean.norm()), "gap {}", gap);
    }

    #[test]
    fn w2_bound_shrinks_with_renoising_time(
        l_s in -3.0..0.99f64,
        n in 1usize..50,
        mu in 0.01..10.0f64,
        eps in 0.0..1.0f64,
    ) {
        let s = Schedule::default_linear();
        let bounds: Vec<f64> = (0..=1000).step_by(50).map(|t| rps_w2_bound(s.alpha_bar(t), l_s, n, mu, eps).unwrap()).collect();
        for w in bounds.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(*bounds.last().unwrap() >= eps);
    }
}
