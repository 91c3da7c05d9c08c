//! Variance-preserving SDE with a linear `beta` schedule.
//!
//! Forward process `dy = -1/2 beta(t) y dt + sqrt(beta(t)) dw` on `[0, T]`,
//! whose perturbation kernel is `N(alpha_t y0, sigma_t^2 I)` with
//! `alpha_t = exp(-1/2 int_0^t beta)` and `sigma_t = sqrt(1 - exp(-int_0^t beta))`.

use crate::error::{check_dim, Error, Result};
use crate::sample::Sample;

/// Slack allowed past either end of the horizon before a time is rejected.
pub const TIME_CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    beta_min: f64,
    beta_max: f64,
    horizon: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "beta schedule needs 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(Self { beta_min, beta_max, horizon: 1.0 })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Validates `t`, clamping drift of at most [`TIME_CLAMP_EPS`] back into `[0, T]`.
    pub fn check_time(&self, t: f64) -> Result<f64> {
        if t.is_nan() || t < -TIME_CLAMP_EPS || t > self.horizon + TIME_CLAMP_EPS {
            return Err(Error::Domain { t, horizon: self.horizon });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// Closed form of `int_0^t beta(s) ds`.
    pub fn integral_beta(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    /// `(alpha_t, sigma_t)` of the perturbation kernel.
    pub fn kernel_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        let ib = self.integral_beta(t)?;
        let mean_coeff = (-0.5 * ib).exp();
        // -expm1(-x) keeps sigma accurate for tiny t
        let std = (-(-ib).exp_m1()).sqrt();
        Ok((mean_coeff, std))
    }

    /// `alpha_t x0 + sigma_t noise`, element-wise.
    pub fn perturb(&self, x0: &Sample, t: f64, noise: &Sample) -> Result<Sample> {
        check_dim(x0.dim(), noise.dim())?;
        let (a, s) = self.kernel_coeffs(t)?;
        let values = x0
            .values()
            .iter()
            .zip(noise.values())
            .map(|(x, e)| a * x + s * e)
            .collect();
        x0.with_values(values)
    }

    /// VP drift `f(y, t) = -1/2 beta(t) y`.
    pub fn drift(&self, y: &Sample, t: f64) -> Result<Sample> {
        let b = self.beta(t)?;
        y.with_values(y.values().iter().map(|v| -0.5 * b * v).collect())
    }

    /// VP diffusion coefficient `g(t) = sqrt(beta(t))`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }
}
