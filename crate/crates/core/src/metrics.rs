//! Distortion (MSE) and perception (W2) measurements, and the exact law of
//! the Stage-2 chain when the posterior is Gaussian.

use nalgebra::{DMatrix, DVector};

use crate::assignment;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_eigen, sym_sqrt};
use crate::posterior::GaussianPosterior;
use crate::schedule::Schedule;

/// Largest sample count accepted by the assignment estimator.
pub const ASSIGNMENT_CAP: usize = 2048;

/// Finite vectors of a common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sample set contains non-finite values".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_vectors(xs: &[DVector<f64>]) -> Result<Self> {
        let dim = xs.first().map(|x| x.len()).ok_or(Error::TooFewSamples { need: 1, got: 0 })?;
        if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(dim, xs.iter().flat_map(|x| x.iter().copied()).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Samples `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> SampleSet {
        SampleSet {
            dim: self.dim,
            data: self.data[start * self.dim..(start + count) * self.dim].to_vec(),
        }
    }

    pub fn to_vectors(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|i| DVector::from_column_slice(self.point(i))).collect()
    }
}

/// One point of a distortion-perception sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DpCurvePoint {
    pub t0: usize,
    pub distortion_mean: f64,
    /// `None` when fewer than two trials were run.
    pub distortion_stderr: Option<f64>,
    pub w2: f64,
    pub w2_stderr: Option<f64>,
    pub n_trials: usize,
}

/// Mean of `values` with its standard error.
pub fn mean_stderr(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Mean squared error `||x - x_hat||^2` over pairs, with its standard error.
pub fn mse(truth: &[DVector<f64>], estimate: &[DVector<f64>]) -> Result<(f64, f64)> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let errs: Result<Vec<f64>> = truth
        .iter()
        .zip(estimate)
        .map(|(x, e)| {
            if x.len() != e.len() {
                Err(Error::DimensionMismatch {
                    expected: x.len(),
                    got: e.len(),
                })
            } else {
                Ok((x - e).norm_squared())
            }
        })
        .collect();
    mean_stderr(&errs?)
}

fn check_psd(c: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = c.amax().max(1.0);
    if !c.is_square() || (c - c.transpose()).amax() > 1e-9 * scale || min_eigenvalue(c) < -1e-9 * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric PSD")));
    }
    Ok(())
}

/// Closed-form W2 between `N(m1, c1)` and `N(m2, c2)`.
pub fn w2_gaussian(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let n = m1.len();
    if m2.len() != n || c1.shape() != (n, n) || c2.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m2.len(),
        });
    }
    check_psd(c1, "first covariance")?;
    check_psd(c2, "second covariance")?;
    let r1 = sym_sqrt(c1);
    let cross = sym_sqrt(&(&r1 * c2 * &r1));
    let bures = (c1 + c2 - cross * 2.0).trace();
    Ok(((m1 - m2).norm_squared() + bures).max(0.0).sqrt())
}

fn check_pair(a: &SampleSet, b: &SampleSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    Ok(())
}

/// Exact empirical W2 in one dimension (sorted coupling).
pub fn w2_1d(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    check_pair(a, b)?;
    if a.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: a.dim(),
        });
    }
    let mut xa = a.data.clone();
    let mut xb = b.data.clone();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let ms = xa.iter().zip(&xb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / xa.len() as f64;
    Ok(ms.sqrt())
}

/// Exact empirical W2 between equal-size sample sets via optimal assignment.
/// One-dimensional inputs use the sorted coupling, which is the same optimum.
pub fn w2_assign(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    check_pair(a, b)?;
    let m = a.len();
    if m > ASSIGNMENT_CAP {
        return Err(Error::TooManySamples {
            count: m,
            cap: ASSIGNMENT_CAP,
        });
    }
    if a.dim() == 1 {
        return w2_1d(a, b);
    }
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        let p = a.point(i);
        for j in 0..m {
            cost[i * m + j] = p.iter().zip(b.point(j)).map(|(x, y)| (x - y).powi(2)).sum();
        }
    }
    let assign = assignment::solve(m, &cost);
    let total: f64 = assign.iter().enumerate().map(|(i, j)| cost[i * m + j]).sum();
    Ok((total / m as f64).max(0.0).sqrt())
}

/// Averages `w2_assign` over `reps` disjoint blocks of `m` samples; returns
/// the mean and the standard error across blocks.
pub fn w2_assign_repeated(a: &SampleSet, b: &SampleSet, m: usize, reps: usize) -> Result<(f64, Option<f64>)> {
    let need = m * reps;
    if a.len() < need || b.len() < need {
        return Err(Error::TooFewSamples {
            need,
            got: a.len().min(b.len()),
        });
    }
    let values: Result<Vec<f64>> = (0..reps).map(|r| w2_assign(&a.slice(r * m, m), &b.slice(r * m, m))).collect();
    let values = values?;
    Ok(match mean_stderr(&values) {
        Ok((mean, se)) => (mean, Some(se)),
        Err(_) => (values[0], None),
    })
}

/// Exact mean and covariance of the Stage-2 Euler-Maruyama chain when the
/// posterior `N(M, C)` is Gaussian and its diffused score is used exactly.
///
/// `grid` lists the descending integer times visited, from `t0` to `0`. With
/// `P_t = (abar_t C + (1 - abar_t) I)^{-1}` one step from `t` to `t'` is affine,
/// `x' = B x + lambda P_t sqrt(abar_t) M + sqrt(lambda) eps` with
/// `B = (1 + lambda/2) I - lambda P_t`, so moments propagate exactly. All
/// matrices share the eigenbasis of `C`, so the recursion runs on diagonals.
pub fn gaussian_stage2_oracle(
    post: &GaussianPosterior,
    s: &Schedule,
    x_map: &DVector<f64>,
    grid: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = post.mean.len();
    if x_map.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x_map.len(),
        });
    }
    let t0 = *grid.first().ok_or_else(|| Error::InvalidParameter("empty step grid".into()))?;
    if t0 > s.num_steps() {
        return Err(Error::TimeOutOfRange {
            t: t0 as f64,
            max: s.num_steps() as f64,
        });
    }
    if t0 == 0 {
        return Ok((x_map.clone(), DMatrix::zeros(n, n)));
    }
    let eig = sym_eigen(&post.cov);
    let q = &eig.eigenvectors;
    let c = &eig.eigenvalues;
    let big_m = q.tr_mul(&post.mean);
    let abar0 = s.alpha_bar(t0);
    let mut mean = q.tr_mul(x_map) * abar0.sqrt();
    let mut var = DVector::from_element(n, 1.0 - abar0);
    for w in grid.windows(2) {
        let (from, to) = (w[0], w[1]);
        let lambda = s.interval_rate(from, to);
        let abar = s.alpha_bar(from);
        for i in 0..n {
            let p = 1.0 / (abar * c[i] + 1.0 - abar);
            let b = 1.0 + 0.5 * lambda - lambda * p;
            mean[i] = b * mean[i] + lambda * p * abar.sqrt() * big_m[i];
            var[i] = b * b * var[i] + lambda;
        }
    }
    let cov = q * DMatrix::from_diagonal(&var) * q.transpose();
    Ok((q * mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn set1(xs: &[f64]) -> SampleSet {
        SampleSet::new(1, xs.to_vec()).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn mse_examples() {
        let a = vec![v1(0.0), v1(0.0)];
        assert_eq!(mse(&a, &a).unwrap(), (0.0, 0.0));
        assert_eq!(mse(&a, &[v1(1.0), v1(-1.0)]).unwrap(), (1.0, 0.0));
        assert!(mse(&a[..1], &a[..1]).is_err());
    }

    #[test]
    fn gaussian_w2_examples() {
        assert!((w2_gaussian(&v1(0.0), &scalar(1.0), &v1(1.0), &scalar(1.0)).unwrap() - 1.0).abs() < 1e-12);
        let w = w2_gaussian(&v1(0.0), &scalar(1.0), &v1(0.0), &scalar(0.5)).unwrap();
        assert!((w - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let m = DVector::from_vec(vec![1.0, -1.0]);
        assert!(w2_gaussian(&m, &c, &m, &c).unwrap() < 1e-7);
        assert!(w2_gaussian(&v1(0.0), &scalar(-1.0), &v1(0.0), &scalar(1.0)).is_err());
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(w2_1d(&set1(&[0.0, 1.0]), &set1(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(w2_1d(&set1(&[0.0, 0.0]), &set1(&[1.0, 1.0])).unwrap(), 1.0);
        assert!(w2_1d(&set1(&[0.0]), &set1(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn quantile_matches_gaussian_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = SampleSet::new(1, randn(&mut rng, 4096).as_slice().to_vec()).unwrap();
        let b = SampleSet::new(1, (randn(&mut rng, 4096) * 0.5f64.sqrt()).as_slice().to_vec()).unwrap();
        let w = w2_1d(&a, &b).unwrap();
        assert!((w - 0.29289).abs() < 0.1 * 0.29289, "{w}");
    }

    #[test]
    fn assignment_in_two_dimensions() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (m, reps) = (512, 4);
        let a = SampleSet::new(2, randn(&mut rng, 2 * m * reps).as_slice().to_vec()).unwrap();
        let base = randn(&mut rng, 2 * m * reps);
        let shifted: Vec<f64> = base.iter().enumerate().map(|(k, v)| if k % 2 == 0 { v + 1.0 } else { *v }).collect();
        let b = SampleSet::new(2, shifted).unwrap();
        let (w, _) = w2_assign_repeated(&a, &b, m, reps).unwrap();
        assert!((w - 1.0).abs() < 0.1, "{w}");
        assert_eq!(w2_assign(&a.slice(0, m), &a.slice(0, m)).unwrap(), 0.0);
    }

    #[test]
    fn assignment_respects_translation_identity() {
        // Shifting one set by e changes every coupling's cost by the same
        // amount: W2^2(a, b + e) = W2^2(a, b) + |e|^2 - 2 <mean(a) - mean(b), e>.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = 300;
        let a = SampleSet::new(3, randn(&mut rng, 3 * m).as_slice().to_vec()).unwrap();
        let b = SampleSet::new(3, randn(&mut rng, 3 * m).as_slice().to_vec()).unwrap();
        let e = [0.7, -0.2, 1.1];
        let moved: Vec<f64> = b.data.iter().enumerate().map(|(k, v)| v + e[k % 3]).collect();
        let moved = SampleSet::new(3, moved).unwrap();
        let mut cross = 0.0;
        for i in 0..m {
            for k in 0..3 {
                cross += (a.point(i)[k] - b.point(i)[k]) * e[k] / m as f64;
            }
        }
        let e2: f64 = e.iter().map(|v| v * v).sum();
        let lhs = w2_assign(&a, &moved).unwrap().powi(2);
        let rhs = w2_assign(&a, &b).unwrap().powi(2) + e2 - 2.0 * cross;
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn assignment_cap() {
        let a = SampleSet::new(2, vec![0.0; 2 * (ASSIGNMENT_CAP + 1)]).unwrap();
        assert!(matches!(w2_assign(&a, &a), Err(Error::TooManySamples { .. })));
    }

    #[test]
    fn oracle_at_zero_and_full_time() {
        let s = Schedule::default_linear();
        let post = GaussianPosterior {
            mean: v1(0.5),
            cov: scalar(0.5),
        };
        let (m, c) = gaussian_stage2_oracle(&post, &s, &v1(0.5), &[0]).unwrap();
        assert_eq!((m[0], c[(0, 0)]), (0.5, 0.0));
        let grid: Vec<usize> = (0..=1000).rev().collect();
        let (m, c) = gaussian_stage2_oracle(&post, &s, &v1(3.0), &grid).unwrap();
        assert!((m[0] - 0.5).abs() < 0.01 * 0.5);
        assert!((c[(0, 0)] - 0.5).abs() < 0.01 * 0.5);
    }
}
