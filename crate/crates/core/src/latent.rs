//! Latent-space variant: both stages run on `z` and the result is decoded
//! through a linear map `x = W z + b`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{pinv, randn, spectral_norm};
use crate::observation::{loglik_grad, pinv_init, Likelihood, Observation};
use crate::rng::{stream, tag};
use crate::score::ScoreModel;
use crate::solver::{map_stage, rps_stage, RunRecord, Stage1Config, Stage2Config};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    w: DMatrix<f64>,
    b: DVector<f64>,
    w_pinv: DMatrix<f64>,
    lipschitz: f64,
}

impl LinearCodec {
    /// Requires `W` (n_x x d) to have full column rank.
    pub fn new(w: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if b.len() != w.nrows() {
            return Err(Error::DimensionMismatch {
                expected: w.nrows(),
                got: b.len(),
            });
        }
        if w.ncols() == 0 || w.ncols() > w.nrows() || w.clone().svd(false, false).rank(1e-12 * spectral_norm(&w)) < w.ncols() {
            return Err(Error::InvalidParameter("decoder matrix must have full column rank".into()));
        }
        let w_pinv = pinv(&w);
        let lipschitz = spectral_norm(&w);
        Ok(Self { w, b, w_pinv, lipschitz })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DVector::zeros(n)).expect("identity has full rank")
    }

    pub fn with_offset(&self, b: DVector<f64>) -> Result<Self> {
        Self::new(self.w.clone(), b)
    }

    pub fn data_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn decode_matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }

    /// Lipschitz constant of the decoder (largest singular value of `W`).
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.w * z + &self.b
    }

    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w_pinv * (x - &self.b)
    }
}

/// `scale` times `d` random orthonormal columns in `R^{n_x}`, zero offset.
pub fn make_codec<R: Rng + ?Sized>(n_x: usize, d: usize, scale: f64, rng: &mut R) -> Result<LinearCodec> {
    if d == 0 || d > n_x {
        return Err(Error::InvalidParameter(format!("need 1 <= d <= n_x, got d = {d}, n_x = {n_x}")));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!("scale = {scale} must be > 0")));
    }
    let g = DMatrix::from_column_slice(n_x, d, randn(rng, n_x * d).as_slice());
    let q = g.qr().q();
    LinearCodec::new(q * scale, DVector::zeros(n_x))
}

/// `W^T loglik_grad(obs, decode(z))`.
pub fn latent_loglik_grad(codec: &LinearCodec, obs: &Observation, z: &DVector<f64>) -> DVector<f64> {
    codec.decode_matrix().tr_mul(&loglik_grad(obs, &codec.decode(z)))
}

/// The observation seen through the decoder, as a Stage-1 data term on `z`.
pub struct LatentLikelihood<'a> {
    pub codec: &'a LinearCodec,
    pub obs: &'a Observation,
}

impl Likelihood for LatentLikelihood<'_> {
    fn dim(&self) -> usize {
        self.codec.latent_dim()
    }

    fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        latent_loglik_grad(self.codec, self.obs, z)
    }

    fn init(&self) -> DVector<f64> {
        self.codec.encode(&pinv_init(self.obs))
    }

    fn log_lik(&self, z: &DVector<f64>) -> f64 {
        self.obs.log_lik(&self.codec.decode(z))
    }
}

/// Both stages in latent coordinates; the record holds decoded points.
pub fn lmap_rps(
    obs: &Observation,
    latent_prior: &dyn ScoreModel,
    latent_posterior: &dyn ScoreModel,
    codec: &LinearCodec,
    cfg1: &Stage1Config,
    cfg2: &Stage2Config,
    seed: u64,
) -> Result<RunRecord> {
    if obs.dim() != codec.data_dim() {
        return Err(Error::DimensionMismatch {
            expected: codec.data_dim(),
            got: obs.dim(),
        });
    }
    let lik = LatentLikelihood { codec, obs };
    let s1 = map_stage(&lik, latent_prior, cfg1, None, &mut stream(seed, tag::STAGE1, 0, 0))?;
    let z_final = rps_stage(&s1.x_map, latent_posterior, cfg2, &mut stream(seed, tag::STAGE2, 0, 0))?;
    Ok(RunRecord {
        x_map: codec.decode(&s1.x_map),
        x_final: codec.decode(&z_final),
        stage1_objective_trace: s1.trace,
        seed,
    })
}

/// Bound on `||decode(z_MAP) - x_MMSE||`: `2 L_D sqrt(d / mu)`.
pub fn latent_map_error_bound(d: usize, mu: f64, l_d: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu = {mu} must be > 0")));
    }
    Ok(2.0 * l_d * (d as f64 / mu).sqrt())
}

/// Data-space W2 bound: `L_D abar^{1 - L_s} sqrt(2 d / mu) + L_D eps_score`.
pub fn latent_rps_w2_bound(alpha_bar_t0: f64, l_s: f64, d: usize, mu: f64, l_d: f64, eps_score: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu = {mu} must be > 0")));
    }
    Ok(l_d * alpha_bar_t0.powf(1.0 - l_s) * (2.0 * d as f64 / mu).sqrt() + l_d * eps_score)
}
