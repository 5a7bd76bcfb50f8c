//! Analytic priors: Gaussian mixtures (closed-form diffusion) and tabulated
//! densities on a grid (numerical diffusion).

mod grid;
mod mixture;

pub use grid::{
    grid_diffused_score, DiffusedGrid, GridPrior, Lattice, DEFAULT_BOUNDS, DEFAULT_POINTS_1D, DEFAULT_POINTS_2D,
};
pub use mixture::{diffuse_gm, GaussianMixture};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse};

/// Either kind of prior.
#[derive(Debug, Clone)]
pub enum Prior {
    Mixture(GaussianMixture),
    Grid(GridPrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Mixture(p) => p.dim(),
            Prior::Grid(p) => p.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Prior::Mixture(p) => p.sample(rng),
            Prior::Grid(p) => p.sample(rng),
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        match self {
            Prior::Mixture(p) => (0..count).map(|_| p.sample(rng)).collect(),
            Prior::Grid(p) => p.sample_n(count, rng),
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Prior::Mixture(p) => Some(p),
            Prior::Grid(_) => None,
        }
    }
}

/// Largest `mu` with `-hess log p(x|y) >= mu I`, given the likelihood curvature
/// (`A^T A / sigma_y^2` for a linear Gaussian observation).
///
/// Closed form for a single Gaussian; minimum over interior lattice nodes for
/// a grid prior. Mixtures with more than one component are rejected.
pub fn strong_concavity_mu(prior: &Prior, likelihood_curvature: &DMatrix<f64>) -> Result<f64> {
    let n = prior.dim();
    if likelihood_curvature.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: likelihood_curvature.nrows(),
        });
    }
    let (mu, location) = match prior {
        Prior::Mixture(p) if p.is_gaussian() => {
            let precision = spd_inverse(p.component_cov(0))?;
            (min_eigenvalue(&(precision + likelihood_curvature)), p.mean())
        }
        Prior::Mixture(p) => {
            return Err(Error::InvalidParameter(format!(
                "strong concavity is only evaluated for single Gaussians, got {} components",
                p.num_components()
            )))
        }
        Prior::Grid(p) => p.min_curvature(likelihood_curvature),
    };
    if !(mu > 0.0) {
        return Err(Error::NotLogConcave {
            min_curvature: mu,
            location: format!("{:?}", location.as_slice()),
        });
    }
    Ok(mu)
}
