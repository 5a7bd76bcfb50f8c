//! Tabulated priors on a uniform lattice in one or two dimensions.
//!
//! The VP-diffused density is obtained by trapezoid quadrature of the
//! Gaussian transition kernel against the table (in log space, so the tails
//! keep full relative accuracy); scores come from fourth-order central
//! differences of the diffused log-density and Catmull-Rom interpolation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, min_eigenvalue};
use crate::schedule::Schedule;

/// Default lattice resolution per axis.
pub const DEFAULT_POINTS_1D: usize = 4096;
pub const DEFAULT_POINTS_2D: usize = 256;
pub const DEFAULT_BOUNDS: (f64, f64) = (-8.0, 8.0);

/// Uniform lattice `lo + i h`, `i = 0..n`, on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Lattice {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo < hi) || points < 8 {
            return Err(Error::InvalidParameter(format!(
                "lattice needs lo < hi and >= 8 points, got [{lo}, {hi}] x {points}"
            )));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + self.spacing() * i as f64
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.coord(i)).collect()
    }

    /// Log trapezoid weights along one axis.
    fn log_trap_weights(&self) -> Vec<f64> {
        let lh = self.spacing().ln();
        (0..self.points)
            .map(|i| if i == 0 || i + 1 == self.points { lh - 2f64.ln() } else { lh })
            .collect()
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// A normalized tabulated density in dimension 1 or 2 (row-major, axis 0 slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrior {
    dim: usize,
    lattice: Lattice,
    log_density: Vec<f64>,
}

/// Trapezoid log-weights for every lattice node.
fn node_log_weights(dim: usize, lattice: &Lattice) -> Vec<f64> {
    let w = lattice.log_trap_weights();
    match dim {
        1 => w,
        _ => w.iter().flat_map(|a| w.iter().map(move |b| a + b)).collect(),
    }
}

impl GridPrior {
    /// Tabulates an unnormalized log-density and normalizes it.
    pub fn from_log_density(dim: usize, lattice: Lattice, log_f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidParameter(format!("grid priors support dim 1 or 2, got {dim}")));
        }
        let xs = lattice.coords();
        let raw: Vec<f64> = match dim {
            1 => xs.iter().map(|x| log_f(&[*x])).collect(),
            _ => xs
                .iter()
                .flat_map(|a| xs.iter().map(|b| log_f(&[*a, *b])).collect::<Vec<_>>())
                .collect(),
        };
        let weights = node_log_weights(dim, &lattice);
        let terms: Vec<f64> = raw.iter().zip(&weights).map(|(l, w)| l + w).collect();
        let log_z = log_sum_exp(&terms);
        if !log_z.is_finite() {
            return Err(Error::InvalidParameter("grid density has no finite mass".into()));
        }
        let prior = Self {
            dim,
            lattice,
            log_density: raw.iter().map(|l| l - log_z).collect(),
        };
        let edge = prior.max_boundary_density();
        if edge > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "grid density {edge:e} at the boundary exceeds 1e-12; widen the bounds"
            )));
        }
        Ok(prior)
    }

    /// `exp(-|x|^2/2 - sum x_i^4/4) / Z`, strongly log-concave with `mu = 1`.
    pub fn quartic(dim: usize, lattice: Lattice) -> Result<Self> {
        Self::from_log_density(dim, lattice, |x| x.iter().map(|v| -0.5 * v * v - 0.25 * v.powi(4)).sum())
    }

    /// Isotropic Gaussian `N(mean * 1, var I)` tabulated on the lattice.
    pub fn gaussian(dim: usize, lattice: Lattice, mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::InvalidParameter("gaussian grid needs var > 0".into()));
        }
        Self::from_log_density(dim, lattice, |x| x.iter().map(|v| -0.5 * (v - mean).powi(2) / var).sum())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn log_density_table(&self) -> &[f64] {
        &self.log_density
    }

    /// Coordinates of node `idx` (row-major).
    pub fn node(&self, idx: usize) -> DVector<f64> {
        match self.dim {
            1 => DVector::from_element(1, self.lattice.coord(idx)),
            _ => {
                let n = self.lattice.points;
                DVector::from_vec(vec![self.lattice.coord(idx / n), self.lattice.coord(idx % n)])
            }
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.log_density.len()
    }

    pub(crate) fn node_log_weights(&self) -> Vec<f64> {
        node_log_weights(self.dim, &self.lattice)
    }

    /// Trapezoid integral of the density (1 by construction, up to rounding).
    pub fn total_mass(&self) -> f64 {
        let terms: Vec<f64> = self.log_density.iter().zip(self.node_log_weights()).map(|(l, w)| l + w).collect();
        log_sum_exp(&terms).exp()
    }

    fn max_boundary_density(&self) -> f64 {
        let n = self.lattice.points;
        let on_edge = |idx: usize| match self.dim {
            1 => idx == 0 || idx + 1 == n,
            _ => {
                let (i, j) = (idx / n, idx % n);
                i == 0 || j == 0 || i + 1 == n || j + 1 == n
            }
        };
        self.log_density
            .iter()
            .enumerate()
            .filter(|(i, _)| on_edge(*i))
            .map(|(_, l)| l.exp())
            .fold(0.0, f64::max)
    }

    /// `p(x) exp(g(x))`, renormalized. No boundary check: see [`GridPrior::boundary_mass`].
    pub fn tilt(&self, g: impl Fn(&DVector<f64>) -> f64) -> Result<GridPrior> {
        let raw: Vec<f64> = (0..self.num_nodes()).map(|i| self.log_density[i] + g(&self.node(i))).collect();
        let terms: Vec<f64> = raw.iter().zip(self.node_log_weights()).map(|(l, w)| l + w).collect();
        let log_z = log_sum_exp(&terms);
        if !log_z.is_finite() {
            return Err(Error::InvalidParameter("tilted grid density has no finite mass".into()));
        }
        Ok(GridPrior {
            dim: self.dim,
            lattice: self.lattice,
            log_density: raw.iter().map(|l| l - log_z).collect(),
        })
    }

    /// Trapezoid mass carried by the outermost ring of lattice nodes.
    pub fn boundary_mass(&self) -> f64 {
        let n = self.lattice.points;
        let weights = self.node_log_weights();
        (0..self.num_nodes())
            .filter(|idx| match self.dim {
                1 => *idx == 0 || idx + 1 == n,
                _ => {
                    let (i, j) = (idx / n, idx % n);
                    i == 0 || j == 0 || i + 1 == n || j + 1 == n
                }
            })
            .map(|i| (self.log_density[i] + weights[i]).exp())
            .sum()
    }

    /// Draws from the tabulated law: a lattice node by its trapezoid mass,
    /// then a uniform jitter within its cell.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sample_n(1, rng).pop().expect("one draw")
    }

    /// `count` independent draws sharing one cumulative mass table.
    pub fn sample_n<R: rand::Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        let mut cdf: Vec<f64> = self
            .log_density
            .iter()
            .zip(self.node_log_weights())
            .map(|(l, w)| (l + w).exp())
            .collect();
        for i in 1..cdf.len() {
            cdf[i] += cdf[i - 1];
        }
        let total = cdf[cdf.len() - 1];
        let h = self.lattice.spacing();
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let idx = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                self.node(idx)
                    .map(|c| (c + h * (rng.random::<f64>() - 0.5)).clamp(self.lattice.lo, self.lattice.hi))
            })
            .collect()
    }

    /// Interpolated `log p(x)`.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        interpolate(self.dim, &self.lattice, &self.log_density, x)
    }

    /// Diffuses the table to noise level `abar`.
    pub fn diffuse_with(&self, abar: f64) -> DiffusedGrid {
        let log_density = if abar >= 1.0 {
            self.log_density.clone()
        } else {
            diffuse_table(self, abar)
        };
        DiffusedGrid::from_table(self.dim, self.lattice, log_density)
    }

    pub fn diffuse(&self, schedule: &Schedule, t: f64) -> Result<DiffusedGrid> {
        Ok(self.diffuse_with(schedule.alpha_bar_at(t)?))
    }

    /// Smallest eigenvalue of `-hess log p + likelihood_curvature` over the
    /// interior lattice nodes, with its location.
    pub fn min_curvature(&self, likelihood_curvature: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let n = self.lattice.points;
        let h2 = self.lattice.spacing().powi(2);
        let l = &self.log_density;
        let mut best = (f64::INFINITY, DVector::zeros(self.dim));
        match self.dim {
            1 => {
                for i in 1..n - 1 {
                    let d2 = (l[i + 1] - 2.0 * l[i] + l[i - 1]) / h2;
                    let c = -d2 + likelihood_curvature[(0, 0)];
                    if c < best.0 {
                        best = (c, self.node(i));
                    }
                }
            }
            _ => {
                let at = |i: usize, j: usize| l[i * n + j];
                for i in 1..n - 1 {
                    for j in 1..n - 1 {
                        let dxx = (at(i + 1, j) - 2.0 * at(i, j) + at(i - 1, j)) / h2;
                        let dyy = (at(i, j + 1) - 2.0 * at(i, j) + at(i, j - 1)) / h2;
                        let dxy = (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1) + at(i - 1, j - 1)) / (4.0 * h2);
                        let m = DMatrix::from_row_slice(2, 2, &[-dxx, -dxy, -dxy, -dyy]) + likelihood_curvature;
                        let c = min_eigenvalue(&m);
                        if c < best.0 {
                            best = (c, self.node(i * n + j));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Terms this far below the largest in a log-sum-exp change it by less than
/// `points * exp(-PRUNE_NATS)`, about 1e-18 on the default lattice.
const PRUNE_NATS: f64 = 50.0;

fn log_kernel(x_t: f64, x0: f64, sqrt_abar: f64, var: f64) -> f64 {
    let d = x_t - sqrt_abar * x0;
    -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// One-axis log-space convolution with the VP kernel:
/// `out[i'] = LSE_i (table[i] + logw[i] + log N(x_i'; sqrt(abar) x_i, 1 - abar))`.
fn convolve_axis(values: &[f64], lattice: &Lattice, logw: &[f64], abar: f64) -> Vec<f64> {
    let xs = lattice.coords();
    let sa = abar.sqrt();
    let var = 1.0 - abar;
    let h = lattice.spacing();
    if var < h * h {
        // Kernel narrower than the lattice: p_t(x) ~ p_0(x / sqrt(abar)) / sqrt(abar).
        return xs
            .iter()
            .map(|x| {
                let u = x / sa;
                if lattice.contains(u) {
                    catmull_rom_1d(lattice, values, u) - sa.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
    }
    // Only terms within PRUNE_NATS of the largest one can matter. With
    // `a_j = values[j] + logw[j]` and `a_max` its maximum, a term is at most
    // `a_max + log_kernel`, which bounds how far from `x_t / sqrt(abar)` a
    // contributing node can sit; it is also at most `a_j + kernel_peak`, which
    // discards nodes outside the prior's effective support.
    let mass: Vec<f64> = values.iter().zip(logw).map(|(v, w)| v + w).collect();
    let (j_top, a_max) = mass
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, a)| if a > best.1 { (j, a) } else { best });
    if a_max == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; xs.len()];
    }
    let kernel_peak = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let last = xs.len() - 1;
    let node = |u: f64| ((u - lattice.lo) / h).round().clamp(0.0, last as f64) as usize;
    let mut terms = Vec::with_capacity(xs.len());
    xs.iter()
        .map(|&xt| {
            let centre = node(xt / sa);
            let floor = [centre, j_top]
                .iter()
                .map(|&j| mass[j] + log_kernel(xt, xs[j], sa, var))
                .fold(f64::NEG_INFINITY, f64::max)
                - PRUNE_NATS;
            let reach = (2.0 * var * (a_max + kernel_peak - floor).max(0.0)).sqrt() / sa;
            let (lo, hi) = (node(xt / sa - reach - h), node(xt / sa + reach + h));
            terms.clear();
            let inv_2var = 0.5 / var;
            for j in lo..=hi {
                let base = mass[j] + kernel_peak;
                if base < floor {
                    continue;
                }
                let d = xt - sa * xs[j];
                let term = base - d * d * inv_2var;
                if term >= floor {
                    terms.push(term);
                }
            }
            log_sum_exp(&terms)
        })
        .collect()
}

fn diffuse_table(prior: &GridPrior, abar: f64) -> Vec<f64> {
    let lat = &prior.lattice;
    let logw = lat.log_trap_weights();
    let n = lat.points;
    match prior.dim {
        1 => convolve_axis(&prior.log_density, lat, &logw, abar),
        _ => {
            let mut pass = vec![0.0; n * n];
            // along axis 0 (column by column)
            for j in 0..n {
                let col: Vec<f64> = (0..n).map(|i| prior.log_density[i * n + j]).collect();
                for (i, v) in convolve_axis(&col, lat, &logw, abar).into_iter().enumerate() {
                    pass[i * n + j] = v;
                }
            }
            // along axis 1 (row by row)
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                let row = &pass[i * n..(i + 1) * n];
                out[i * n..(i + 1) * n].copy_from_slice(&convolve_axis(row, lat, &logw, abar));
            }
            out
        }
    }
}

/// Diffused log-density table with precomputed score tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedGrid {
    dim: usize,
    lattice: Lattice,
    log_density: Vec<f64>,
    score: Vec<Vec<f64>>,
}

/// Fourth-order central difference of a line of values (second order at the ends).
fn differentiate_line(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if i >= 2 && i + 2 < n {
                (-values[i + 2] + 8.0 * values[i + 1] - 8.0 * values[i - 1] + values[i - 2]) / (12.0 * h)
            } else if i >= 1 && i + 1 < n {
                (values[i + 1] - values[i - 1]) / (2.0 * h)
            } else if i == 0 {
                (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h)
            } else {
                (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * h)
            }
        })
        .collect()
}

impl DiffusedGrid {
    fn from_table(dim: usize, lattice: Lattice, log_density: Vec<f64>) -> Self {
        let n = lattice.points;
        let h = lattice.spacing();
        let score = match dim {
            1 => vec![differentiate_line(&log_density, h)],
            _ => {
                let mut d0 = vec![0.0; n * n];
                let mut d1 = vec![0.0; n * n];
                for j in 0..n {
                    let col: Vec<f64> = (0..n).map(|i| log_density[i * n + j]).collect();
                    for (i, v) in differentiate_line(&col, h).into_iter().enumerate() {
                        d0[i * n + j] = v;
                    }
                }
                for i in 0..n {
                    d1[i * n..(i + 1) * n].copy_from_slice(&differentiate_line(&log_density[i * n..(i + 1) * n], h));
                }
                vec![d0, d1]
            }
        };
        Self {
            dim,
            lattice,
            log_density,
            score,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        interpolate(self.dim, &self.lattice, &self.log_density, x)
    }

    /// Interpolated score `grad log p_t(x)`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let comps: Result<Vec<f64>> = self
            .score
            .iter()
            .map(|table| interpolate(self.dim, &self.lattice, table, x))
            .collect();
        Ok(DVector::from_vec(comps?))
    }
}

/// Score of the tabulated prior diffused to time `t`, evaluated at `x`.
///
/// Builds the full diffused table for every call; use [`GridPrior::diffuse`]
/// and [`DiffusedGrid::score`] when querying many points at one time.
pub fn grid_diffused_score(p: &GridPrior, schedule: &Schedule, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    p.diffuse(schedule, t)?.score(x)
}

fn catmull_rom_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ]
}

/// Stencil indices (clamped) and weights for coordinate `x`.
fn stencil(lattice: &Lattice, x: f64) -> ([usize; 4], [f64; 4]) {
    let n = lattice.points;
    let pos = (x - lattice.lo) / lattice.spacing();
    let base = (pos.floor() as isize).clamp(0, n as isize - 2);
    let u = pos - base as f64;
    let idx = [base - 1, base, base + 1, base + 2].map(|i| i.clamp(0, n as isize - 1) as usize);
    (idx, catmull_rom_weights(u))
}

fn catmull_rom_1d(lattice: &Lattice, values: &[f64], x: f64) -> f64 {
    let (idx, w) = stencil(lattice, x);
    (0..4).map(|k| w[k] * values[idx[k]]).sum()
}

fn interpolate(dim: usize, lattice: &Lattice, table: &[f64], x: &DVector<f64>) -> Result<f64> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    if x.iter().any(|v| !lattice.contains(*v)) {
        return Err(Error::OutOfSupport(format!(
            "{:?} outside [{}, {}]",
            x.as_slice(),
            lattice.lo,
            lattice.hi
        )));
    }
    Ok(match dim {
        1 => catmull_rom_1d(lattice, table, x[0]),
        _ => {
            let n = lattice.points;
            let (ia, wa) = stencil(lattice, x[0]);
            let (ib, wb) = stencil(lattice, x[1]);
            let mut acc = 0.0;
            for a in 0..4 {
                let mut row = 0.0;
                for b in 0..4 {
                    row += wb[b] * table[ia[a] * n + ib[b]];
                }
                acc += wa[a] * row;
            }
            acc
        }
    })
}
