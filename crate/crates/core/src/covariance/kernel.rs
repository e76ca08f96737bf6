use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use super::bessel::{bessel_k, matern_nu2_shape};
use super::CovarianceError;

/// Separable space-time kernel: `sigma2_u * matern(d) * tapered_temporal(h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub nu: f64,
    pub theta_s: f64,
    pub theta_t: f64,
    pub sigma2_u: f64,
    /// Taper range in days; lags at or beyond it are exactly uncorrelated.
    pub taper_range: f64,
}

impl KernelSpec {
    pub const DEFAULT_NU: f64 = 2.0;
    pub const DEFAULT_TAPER: f64 = 7.0;

    pub fn new(sigma2_u: f64, theta_s: f64, theta_t: f64) -> Self {
        Self {
            nu: Self::DEFAULT_NU,
            theta_s,
            theta_t,
            sigma2_u,
            taper_range: Self::DEFAULT_TAPER,
        }
    }

    pub fn validate(&self) -> Result<(), CovarianceError> {
        if !(self.nu > 0.0) || !(self.taper_range > 0.0) {
            return Err(CovarianceError::InvalidKernel(format!(
                "nu = {} and taper range = {} must be positive",
                self.nu, self.taper_range
            )));
        }
        if !(self.theta_s > 0.0) || !(self.theta_t > 0.0) || !(self.sigma2_u >= 0.0) {
            return Err(CovarianceError::InvalidKernel(
                "decay rates must be positive and the variance non-negative".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn spatial(&self, d: f64) -> f64 {
        matern_unchecked(d, self.theta_s, self.nu)
    }

    #[inline]
    pub fn temporal(&self, h: f64) -> f64 {
        tapered_unchecked(h, self.theta_t, self.taper_range)
    }

    /// Full covariance between two space-time points.
    #[inline]
    pub fn covariance(&self, d: f64, h: f64) -> f64 {
        let ct = self.temporal(h);
        if ct == 0.0 {
            return 0.0;
        }
        self.sigma2_u * self.spatial(d) * ct
    }
}

/// Matérn correlation `(2 sqrt(nu) theta d)^nu K_nu(2 sqrt(nu) theta d) / (2^(nu-1) Gamma(nu))`.
pub fn matern(d: f64, theta_s: f64, nu: f64) -> Result<f64, CovarianceError> {
    if !d.is_finite() {
        return Err(CovarianceError::NonFinite("distance"));
    }
    if d < 0.0 {
        return Err(CovarianceError::Negative("distance"));
    }
    Ok(matern_unchecked(d, theta_s, nu))
}

#[inline]
fn matern_unchecked(d: f64, theta_s: f64, nu: f64) -> f64 {
    let x = 2.0 * nu.sqrt() * theta_s * d;
    if x == 0.0 {
        return 1.0;
    }
    if nu == 2.0 {
        return matern_nu2_shape(x);
    }
    if nu == 0.5 {
        // (x)^{1/2} K_{1/2}(x) / (2^{-1/2} sqrt(pi)) = exp(-x)
        return (-x).exp();
    }
    let k = bessel_k(nu, x);
    if k == 0.0 {
        return 0.0;
    }
    (nu * x.ln() + k.ln() - (nu - 1.0) * std::f64::consts::LN_2 - gamma(nu).ln()).exp()
}

/// Exponential correlation multiplied by the compactly supported taper
/// `max(1 - h/r, 0)^2 (1 + h/(2r))`.
pub fn tapered_temporal(h: f64, theta_t: f64, r: f64) -> Result<f64, CovarianceError> {
    if !h.is_finite() {
        return Err(CovarianceError::NonFinite("lag"));
    }
    if h < 0.0 {
        return Err(CovarianceError::Negative("lag"));
    }
    Ok(tapered_unchecked(h, theta_t, r))
}

#[inline]
fn tapered_unchecked(h: f64, theta_t: f64, r: f64) -> f64 {
    if h >= r {
        return 0.0;
    }
    let one_minus = 1.0 - h / r;
    (-theta_t * h).exp() * one_minus * one_minus * (1.0 + h / (2.0 * r))
}
