use std::sync::Arc;

use maprps::linalg::{randn, spd_inverse, symmetrize};
use maprps::metrics::{w2_1d, SampleSet};
use maprps::observation::{LikelihoodForm, LinearOperator, Observation, Operator};
use maprps::posterior::gm_posterior;
use maprps::prior::GaussianMixture;
use maprps::score::{dps_score, exact_posterior_score, Jacobian, MixtureScore, ScoreModel};
use maprps::Schedule;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Random mixture in `dim` dimensions with `k` components and covariances
/// `L L^T + 0.3 I`.
fn mixture(dim: usize, k: usize, seed: u64) -> GaussianMixture {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..k).map(|i| 1.0 + i as f64 * 0.5).collect();
    let means = (0..k).map(|_| randn(&mut rng, dim) * 1.5).collect();
    let covs = (0..k)
        .map(|_| {
            let l = DMatrix::from_column_slice(dim, dim, randn(&mut rng, dim * dim).as_slice()) * 0.6;
            &l * l.transpose() + DMatrix::identity(dim, dim) * 0.3
        })
        .collect();
    GaussianMixture::normalized(weights, means, covs).unwrap()
}

fn projection(m: usize, n: usize, seed: u64) -> LinearOperator {
    LinearOperator::random_projection(m, n, &mut ChaCha12Rng::seed_from_u64(seed ^ 0x5eed)).unwrap()
}

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let r = x - mean;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (r.dot(&chol.solve(&r)) + log_det + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `grad_{x_t} log p_t(y | x_t)` for a mixture prior under `y = A x_0 + sigma n`,
/// written out component by component. With `P_k = (abar S_k + (1 - abar) I)^{-1}`
/// and `G_k = sqrt(abar) S_k P_k`, component `k` contributes the factor
/// `b_k(x_t) = pi_k N(x_t; sqrt(abar) m_k, P_k^{-1})` to `p_t(x_t)` and
/// `a_k(x_t) = b_k(x_t) N(y; A mu_k, A V_k A^T + sigma^2 I)` to `p_t(x_t, y)`, where
/// `mu_k = m_k + G_k (x_t - sqrt(abar) m_k)` and `V_k = S_k - sqrt(abar) G_k S_k`.
fn evidence_gradient(prior: &GaussianMixture, a: &DMatrix<f64>, sigma: f64, y: &DVector<f64>, abar: f64, x: &DVector<f64>) -> DVector<f64> {
    let n = prior.dim();
    let eye = DMatrix::identity(n, n);
    let k = prior.num_components();
    let mut log_a = Vec::with_capacity(k);
    let mut log_b = Vec::with_capacity(k);
    let mut grad_a = Vec::with_capacity(k);
    let mut grad_b = Vec::with_capacity(k);
    for c in 0..k {
        let m = prior.component_mean(c);
        let s = prior.component_cov(c);
        let marg = s * abar + &eye * (1.0 - abar);
        let p = spd_inverse(&marg).unwrap();
        let g = s * &p * abar.sqrt();
        let centered = x - m * abar.sqrt();
        let mu = m + &g * &centered;
        let v = symmetrize(&(s - &g * s * abar.sqrt()));
        let ev_cov = symmetrize(&(a * &v * a.transpose())) + DMatrix::identity(a.nrows(), a.nrows()) * sigma * sigma;
        let lb = prior.weights()[c].ln() + log_gauss(x, &(m * abar.sqrt()), &marg);
        let gb = -(&p * &centered);
        let resid = y - a * &mu;
        let ga = &gb + g.transpose() * a.transpose() * spd_inverse(&ev_cov).unwrap() * &resid;
        log_a.push(lb + log_gauss(y, &(a * &mu), &ev_cov));
        log_b.push(lb);
        grad_a.push(ga);
        grad_b.push(gb);
    }
    let softmax_mean = |logs: &[f64], grads: &[DVector<f64>]| {
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        grads.iter().zip(&w).fold(DVector::zeros(n), |acc, (g, wi)| acc + g * (wi / total))
    };
    softmax_mean(&log_a, &grad_a) - softmax_mean(&log_b, &grad_b)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mixture_score_matches_log_density_differences(dim in 1usize..4, k in 1usize..4, seed in any::<u64>(), t in 0usize..1000) {
        let s = Schedule::default_linear();
        let p = mixture(dim, k, seed);
        let model = MixtureScore::new(p.clone(), s.clone());
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
        for _ in 0..20 {
            let x = randn(&mut rng, dim) * 2.0;
            let score = model.score(&x, t).unwrap();
            for j in 0..dim {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (model.log_density(&xp, t).unwrap() - model.log_density(&xm, t).unwrap()) / (2.0 * h);
                prop_assert!((fd - score[j]).abs() <= 1e-5 * score.amax().max(1.0), "{} vs {}", fd, score[j]);
            }
        }
    }

    #[test]
    fn posterior_score_splits_into_prior_and_evidence(
        dim in 1usize..4,
        k in 1usize..3,
        seed in any::<u64>(),
        t in 0usize..=1000,
        sigma in 0.2..1.5f64,
    ) {
        let s = Schedule::default_linear();
        let prior = mixture(dim, k, seed);
        let a = projection(dim.div_ceil(2).max(1), dim, seed);
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(2));
        let y = a.apply(&prior.sample(&mut rng)) + randn(&mut rng, a.out_dim()) * sigma;
        let obs = Observation::new(y.clone(), Operator::Linear(a.clone()), sigma, LikelihoodForm::Squared).unwrap();
        let post = gm_posterior(&prior, &obs).unwrap();
        let abar = s.alpha_bar(t);
        for _ in 0..5 {
            let x = randn(&mut rng, dim);
            let lhs = exact_posterior_score(&post, &s, &x, t).unwrap() - prior.score_at(abar, &x);
            let rhs = evidence_gradient(&prior, a.matrix(), sigma, &y, abar, &x);
            let scale = rhs.norm().max(lhs.norm()).max(1e-3);
            prop_assert!((&lhs - &rhs).norm() <= 1e-8 * scale, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn noising_contracts_point_masses(a in -4.0..4.0f64, b in -4.0..4.0f64, t in 1usize..=1000) {
        // The diffused laws are N(sqrt(abar) a, 1 - abar) and N(sqrt(abar) b, 1 - abar),
        // so their quantile coupling is exact: W2 = sqrt(abar) |a - b|.
        let s = Schedule::default_linear();
        let abar = s.alpha_bar(t);
        let mut rng = ChaCha12Rng::seed_from_u64((t as u64) << 8);
        let draws = 20_000;
        let pa: Vec<f64> = (0..draws).map(|_| s.forward_sample(&DVector::from_element(1, a), t as f64, &mut rng).unwrap()[0]).collect();
        let pb: Vec<f64> = (0..draws).map(|_| s.forward_sample(&DVector::from_element(1, b), t as f64, &mut rng).unwrap()[0]).collect();
        let w = w2_1d(&SampleSet::new(1, pa).unwrap(), &SampleSet::new(1, pb).unwrap()).unwrap();
        let exact = abar.sqrt() * (a - b).abs();
        // Two independent empirical quantile functions of sd sqrt(1 - abar) differ by O(sd / sqrt(draws)).
        prop_assert!((w - exact).abs() <= 0.05 * (1.0 - abar).sqrt() + 1e-12, "{} vs {}", w, exact);
        prop_assert!(w <= (a - b).abs() + 0.05);
    }
}

#[test]
fn diffused_mixture_density_matches_forward_samples() {
    let s = Schedule::default_linear();
    let prior = GaussianMixture::normalized(
        vec![0.3, 0.7],
        vec![DVector::from_element(1, -2.0), DVector::from_element(1, 1.5)],
        vec![DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 0.9)],
    )
    .unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for t in [100.0, 400.0] {
        let diffused = prior.diffuse(&s, t).unwrap();
        let normals: Vec<Normal> = (0..2)
            .map(|k| Normal::new(diffused.component_mean(k)[0], diffused.component_cov(k)[(0, 0)].sqrt()).unwrap())
            .collect();
        let cdf = |x: f64| diffused.weights().iter().zip(&normals).map(|(w, n)| w * n.cdf(x)).sum::<f64>();
        let draws = 1_000_000;
        let mut xs: Vec<f64> = (0..draws).map(|_| s.forward_sample(&prior.sample(&mut rng), t, &mut rng).unwrap()[0]).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / draws as f64).abs().max(((i + 1) as f64 / draws as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.01, "t={t}: KS {ks}");
    }
}

#[test]
fn dps_score_approaches_exact_posterior_score_near_zero_noise() {
    let s = Schedule::default_linear();
    let prior = Arc::new(MixtureScore::new(GaussianMixture::standard(1), s.clone())) as Arc<dyn ScoreModel>;
    let obs = Observation::new(DVector::from_element(1, 0.7), Operator::Linear(LinearOperator::identity(1)), 0.8, LikelihoodForm::Squared).unwrap();
    let post = gm_posterior(&GaussianMixture::standard(1), &obs).unwrap();
    let gap = |t: usize| {
        (0..=600)
            .map(|i| {
                let x = DVector::from_element(1, -3.0 + 0.01 * i as f64);
                let d = dps_score(prior.clone(), &obs, &x, t, 1.0, Jacobian::Full).unwrap();
                (d - exact_posterior_score(&post, &s, &x, t).unwrap()).amax()
            })
            .fold(0.0, f64::max)
    };
    assert!(gap(0) <= 1e-6, "gap at t=0: {}", gap(0));
    // DPS evaluates the evidence with covariance sigma^2 where the exact one is
    // sigma^2 + Var(x_0 | x_t) ~ sigma^2 + (1 - abar). To first order the gap is
    // (1 - abar) / sigma^4 * |y - x|, at most 3.7 (1 - abar) / sigma^4 on [-3, 3].
    let sigma4 = 0.8f64.powi(4);
    let mut prev = 0.0;
    for t in [1, 2, 5, 10] {
        let g = gap(t);
        let first_order = 3.7 * (1.0 - s.alpha_bar(t)) / sigma4;
        assert!(g <= 1.1 * first_order, "t={t}: gap {g} vs first-order {first_order}");
        assert!(g > prev);
        prev = g;
    }
}
