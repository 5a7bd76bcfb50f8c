//! Variance-preserving diffusion schedule.
//!
//! The schedule is stored on the integer grid `0..=T` as cumulative products
//! `alpha_bar[t]`. Continuous queries interpolate `log alpha_bar` linearly
//! between grid points, which keeps `alpha_bar` positive and makes the SDE
//! coefficients piecewise constant:
//!
//! * `f(t) = d log sqrt(alpha_bar) / dt`
//! * `g2(t) = d(1 - alpha_bar)/dt - 2 f(t) (1 - alpha_bar)`
//!
//! On a segment where `log alpha_bar` drops by `lambda` per unit time this
//! gives `f = -lambda / 2` and `g2 = lambda`.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::randn;

/// Floor applied to `alpha_bar` before taking logs.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// Threshold below which the terminal `alpha_bar` counts as pure noise.
pub const TERMINAL_ALPHA_BAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
    log_alpha_bar: Vec<f64>,
}

/// Drift and squared diffusion coefficient of the forward SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeCoeffs {
    pub f: f64,
    pub g2: f64,
}

impl Schedule {
    /// Discrete linear-beta construction: `beta_s` linearly spaced over
    /// `[beta_min, beta_max]` for `s = 1..=T`, `alpha_bar[t] = prod (1 - beta_s)`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "schedule needs T >= 2, got {num_steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let step = (beta_max - beta_min) / (num_steps - 1) as f64;
        let mut log_ab = Vec::with_capacity(num_steps + 1);
        log_ab.push(0.0);
        let mut acc = 0.0;
        for s in 0..num_steps {
            let beta = beta_min + step * s as f64;
            acc += (-beta).ln_1p();
            log_ab.push(acc);
        }
        let alpha_bar = log_ab.iter().map(|l| l.exp()).collect();
        Ok(Self {
            alpha_bar,
            log_alpha_bar: log_ab,
        })
    }

    /// The default schedule: `T = 1000`, `beta` in `[1e-4, 0.02]`.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    /// Builds a schedule from a tabulated `alpha_bar` (non-increasing, starting at 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::InvalidParameter("alpha_bar needs at least 3 entries".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidParameter("alpha_bar[0] must be exactly 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] <= w[0]) || w[1] <= 0.0) {
            return Err(Error::InvalidParameter(
                "alpha_bar must be positive and non-increasing".into(),
            ));
        }
        let log_alpha_bar = alpha_bar
            .iter()
            .map(|a| a.max(ALPHA_BAR_FLOOR).ln())
            .collect();
        Ok(Self {
            alpha_bar,
            log_alpha_bar,
        })
    }

    /// Number of grid steps `T`.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` at an integer grid time.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// True when `alpha_bar[T]` is numerically zero.
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bar[self.num_steps()] <= TERMINAL_ALPHA_BAR
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let max = self.num_steps() as f64;
        if !(0.0..=max).contains(&t) {
            return Err(Error::TimeOutOfRange { t, max });
        }
        Ok(())
    }

    /// Index `k` of the segment `[k, k+1]` containing `t` (the last segment for `t = T`).
    fn segment(&self, t: f64) -> usize {
        (t.floor() as usize).min(self.num_steps() - 1)
    }

    /// Decay rate of `log alpha_bar` on segment `[k, k+1]`.
    fn segment_rate(&self, k: usize) -> f64 {
        let hi = self.alpha_bar[k].max(ALPHA_BAR_FLOOR).ln();
        let lo = self.alpha_bar[k + 1].max(ALPHA_BAR_FLOOR).ln();
        hi - lo
    }

    /// `alpha_bar` at a continuous time, interpolating `log alpha_bar`.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let k = self.segment(t);
        let frac = t - k as f64;
        let log = self.log_alpha_bar[k].max(ALPHA_BAR_FLOOR.ln()) - frac * self.segment_rate(k);
        Ok(if frac == 0.0 { self.alpha_bar[k] } else { log.exp() })
    }

    /// Forward-SDE coefficients `(f, g2)` at continuous time `t`.
    pub fn coeffs(&self, t: f64) -> Result<SdeCoeffs> {
        let abar = self.alpha_bar_at(t)?;
        let rate = self.segment_rate(self.segment(t));
        let dlog_sqrt = -0.5 * rate;
        let dabar = -rate * abar;
        let g2 = -dabar - 2.0 * dlog_sqrt * (1.0 - abar);
        Ok(SdeCoeffs {
            f: dlog_sqrt,
            g2: g2.max(0.0),
        })
    }

    /// Coefficients used by the reverse step from grid time `t` to `t - 1`.
    pub fn step_coeffs(&self, t: usize) -> SdeCoeffs {
        debug_assert!(t >= 1 && t <= self.num_steps());
        let rate = self.segment_rate(t - 1);
        SdeCoeffs {
            f: -0.5 * rate,
            g2: rate,
        }
    }

    /// Integrated rate `log alpha_bar[to] - log alpha_bar[from]` of a reverse
    /// step from grid time `from` down to `to`; `step_coeffs(t).g2` for unit steps.
    pub fn interval_rate(&self, from: usize, to: usize) -> f64 {
        debug_assert!(to < from && from <= self.num_steps());
        (to..from).map(|k| self.segment_rate(k)).sum()
    }

    /// Draws `x_t ~ N(sqrt(abar_t) x0, (1 - abar_t) I)`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        t: f64,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let abar = self.alpha_bar_at(t)?;
        if abar == 1.0 {
            return Ok(x0.clone());
        }
        let noise = randn(rng, x0.len());
        Ok(x0 * abar.sqrt() + noise * (1.0 - abar).sqrt())
    }
}
