//! Hyperparameters, model-variant flags and hyperpriors.
//!
//! The sampler works on an unconstrained vector: slopes as-is, every variance
//! and decay rate on the log scale. [`ParamSpace`] owns that mapping and the
//! log-Jacobian that goes with it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HyperError {
    #[error("parameter {name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("parameter {name} is not finite")]
    NonFinite { name: &'static str },
    #[error("invalid model flags `{0}`, expected U,GST,A with each 0 or 1")]
    Flags(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
}

/// The three indicator switches that pick one of the eight candidate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Short-range Gaussian process term `u`.
    pub u: bool,
    /// Long-range spatio-temporal interaction smooth.
    pub gst: bool,
    /// Multiday aggregate readings.
    pub a: bool,
}

impl ModelFlags {
    pub const FINAL: ModelFlags = ModelFlags {
        u: true,
        gst: false,
        a: true,
    };

    pub fn all() -> [ModelFlags; 8] {
        let mut out = [ModelFlags::FINAL; 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = ModelFlags {
                u: i & 4 != 0,
                gst: i & 2 != 0,
                a: i & 1 != 0,
            };
        }
        out
    }

    /// Model label, e.g. `M(U=1,GST=0,A=1)`.
    pub fn label(&self) -> String {
        format!(
            "M(U={},GST={},A={})",
            u8::from(self.u),
            u8::from(self.gst),
            u8::from(self.a)
        )
    }
}

impl fmt::Display for ModelFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", u8::from(self.u), u8::from(self.gst), u8::from(self.a))
    }
}

impl FromStr for ModelFlags {
    type Err = HyperError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits: Vec<&str> = s.split(',').map(str::trim).collect();
        let bit = |b: &str| match b {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(HyperError::Flags(s.to_string())),
        };
        if bits.len() != 3 {
            return Err(HyperError::Flags(s.to_string()));
        }
        Ok(ModelFlags {
            u: bit(bits[0])?,
            gst: bit(bits[1])?,
            a: bit(bits[2])?,
        })
    }
}

/// Nonlinear, covariance and variance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha_1i: f64,
    pub alpha_1a: f64,
    pub sigma2_o: f64,
    pub sigma2_i: f64,
    pub sigma2_a: f64,
    pub sigma2_alpha0: f64,
    pub tau2_s: f64,
    pub tau2_t: f64,
    pub tau2_st_s: f64,
    pub tau2_st_t: f64,
    pub sigma2_u: f64,
    /// Spatial decay, 1/km.
    pub theta_s: f64,
    /// Temporal decay, 1/day.
    pub theta_t: f64,
}

impl Default for HyperParams {
    /// Posterior means reported for the final Boston model; a reasonable start.
    fn default() -> Self {
        Self {
            alpha_1i: 0.956,
            alpha_1a: 0.698,
            sigma2_o: 0.045,
            sigma2_i: 0.129,
            sigma2_a: 0.037,
            sigma2_alpha0: 0.030,
            tau2_s: 0.030,
            tau2_t: 2.774,
            tau2_st_s: 0.030,
            tau2_st_t: 2.774,
            sigma2_u: 0.098,
            theta_s: 0.054,
            theta_t: 0.120,
        }
    }
}

/// Identifies one scalar in [`HyperParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    Alpha1I,
    Alpha1A,
    Sigma2O,
    Sigma2I,
    Sigma2A,
    Sigma2Alpha0,
    Tau2S,
    Tau2T,
    Tau2StS,
    Tau2StT,
    Sigma2U,
    ThetaS,
    ThetaT,
}

impl Param {
    pub fn name(&self) -> &'static str {
        match self {
            Param::Alpha1I => "alpha_1I",
            Param::Alpha1A => "alpha_1A",
            Param::Sigma2O => "sigma2_O",
            Param::Sigma2I => "sigma2_I",
            Param::Sigma2A => "sigma2_A",
            Param::Sigma2Alpha0 => "sigma2_alpha0",
            Param::Tau2S => "tau2_S",
            Param::Tau2T => "tau2_T",
            Param::Tau2StS => "tau2_ST_S",
            Param::Tau2StT => "tau2_ST_T",
            Param::Sigma2U => "sigma2_u",
            Param::ThetaS => "theta_S",
            Param::ThetaT => "theta_T",
        }
    }

    /// Slopes are unconstrained; everything else is positive and log-transformed.
    pub fn is_positive(&self) -> bool {
        !matches!(self, Param::Alpha1I | Param::Alpha1A)
    }

    pub fn get(&self, h: &HyperParams) -> f64 {
        match self {
            Param::Alpha1I => h.alpha_1i,
            Param::Alpha1A => h.alpha_1a,
            Param::Sigma2O => h.sigma2_o,
            Param::Sigma2I => h.sigma2_i,
            Param::Sigma2A => h.sigma2_a,
            Param::Sigma2Alpha0 => h.sigma2_alpha0,
            Param::Tau2S => h.tau2_s,
            Param::Tau2T => h.tau2_t,
            Param::Tau2StS => h.tau2_st_s,
            Param::Tau2StT => h.tau2_st_t,
            Param::Sigma2U => h.sigma2_u,
            Param::ThetaS => h.theta_s,
            Param::ThetaT => h.theta_t,
        }
    }

    pub fn set(&self, h: &mut HyperParams, value: f64) {
        let slot = match self {
            Param::Alpha1I => &mut h.alpha_1i,
            Param::Alpha1A => &mut h.alpha_1a,
            Param::Sigma2O => &mut h.sigma2_o,
            Param::Sigma2I => &mut h.sigma2_i,
            Param::Sigma2A => &mut h.sigma2_a,
            Param::Sigma2Alpha0 => &mut h.sigma2_alpha0,
            Param::Tau2S => &mut h.tau2_s,
            Param::Tau2T => &mut h.tau2_t,
            Param::Tau2StS => &mut h.tau2_st_s,
            Param::Tau2StT => &mut h.tau2_st_t,
            Param::Sigma2U => &mut h.sigma2_u,
            Param::ThetaS => &mut h.theta_s,
            Param::ThetaT => &mut h.theta_t,
        };
        *slot = value;
    }

    pub const ALL: [Param; 13] = [
        Param::Alpha1I,
        Param::Alpha1A,
        Param::Sigma2O,
        Param::Sigma2I,
        Param::Sigma2A,
        Param::Sigma2Alpha0,
        Param::Tau2S,
        Param::Tau2T,
        Param::Tau2StS,
        Param::Tau2StT,
        Param::Sigma2U,
        Param::ThetaS,
        Param::ThetaT,
    ];
}

impl HyperParams {
    /// Strict positivity of every variance and decay rate, finiteness of slopes.
    pub fn validate(&self) -> Result<(), HyperError> {
        for p in Param::ALL {
            let v = p.get(self);
            if !v.is_finite() {
                return Err(HyperError::NonFinite { name: p.name() });
            }
            if p.is_positive() && v <= 0.0 {
                return Err(HyperError::NonPositive {
                    name: p.name(),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Hyperprior settings. Defaults: half-normal(10) on standard deviations,
/// N(0, 10^2) on slopes, log-uniform decay rates on bounded ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub sd_scale: f64,
    pub slope_sd: f64,
    pub theta_s_range: (f64, f64),
    pub theta_t_range: (f64, f64),
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            sd_scale: 10.0,
            slope_sd: 10.0,
            theta_s_range: (1e-4, 10.0),
            theta_t_range: (1e-3, 5.0),
        }
    }
}

impl HyperPriors {
    /// Log prior density of one coordinate in sampler space (log scale for
    /// positive parameters), Jacobian included, up to a constant.
    pub fn log_density(&self, param: Param, z: f64) -> f64 {
        match param {
            Param::Alpha1I | Param::Alpha1A => -0.5 * (z / self.slope_sd).powi(2),
            Param::ThetaS | Param::ThetaT => {
                let (lo, hi) = if param == Param::ThetaS {
                    self.theta_s_range
                } else {
                    self.theta_t_range
                };
                if z >= lo.ln() && z <= hi.ln() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            _ => {
                // Variance V = exp(z), sd = exp(z/2) ~ half-normal(scale).
                let v = z.exp();
                -v / (2.0 * self.sd_scale * self.sd_scale) + 0.5 * z
            }
        }
    }
}

/// Which data sources a dataset provides; decides which parameters are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcesPresent {
    pub indoor_daily: bool,
    pub aggregate: bool,
}

/// Ordered list of active parameters and their transforms for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub params: Vec<Param>,
    /// Values used for parameters that are not sampled.
    pub fixed: HyperParams,
    pub priors: HyperPriors,
}

impl ParamSpace {
    pub fn new(flags: ModelFlags, sources: SourcesPresent, fixed: HyperParams, priors: HyperPriors) -> Self {
        let aggregate = flags.a && sources.aggregate;
        let mut params = Vec::new();
        if sources.indoor_daily {
            params.push(Param::Alpha1I);
        }
        if aggregate {
            params.push(Param::Alpha1A);
        }
        params.push(Param::Sigma2O);
        if sources.indoor_daily {
            params.push(Param::Sigma2I);
        }
        if aggregate {
            params.push(Param::Sigma2A);
        }
        if sources.indoor_daily || aggregate {
            params.push(Param::Sigma2Alpha0);
        }
        params.push(Param::Tau2S);
        params.push(Param::Tau2T);
        if flags.gst {
            params.push(Param::Tau2StS);
            params.push(Param::Tau2StT);
        }
        if flags.u {
            params.push(Param::Sigma2U);
            params.push(Param::ThetaS);
            params.push(Param::ThetaT);
        }
        Self {
            params,
            fixed,
            priors,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.params.iter().map(Param::name).collect()
    }

    pub fn position(&self, p: Param) -> Option<usize> {
        self.params.iter().position(|&q| q == p)
    }

    /// Unconstrained coordinates of `h`.
    pub fn to_vector(&self, h: &HyperParams) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| {
                let v = p.get(h);
                if p.is_positive() {
                    v.ln()
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn from_vector(&self, z: &[f64]) -> Result<HyperParams, HyperError> {
        if z.len() != self.dim() {
            return Err(HyperError::Length {
                got: z.len(),
                expected: self.dim(),
            });
        }
        let mut h = self.fixed;
        for (p, &zi) in self.params.iter().zip(z) {
            if !zi.is_finite() {
                return Err(HyperError::NonFinite { name: p.name() });
            }
            p.set(&mut h, if p.is_positive() { zi.exp() } else { zi });
        }
        h.validate()?;
        Ok(h)
    }

    /// Sum of per-coordinate hyperprior log densities in sampler space.
    pub fn log_prior(&self, z: &[f64]) -> f64 {
        self.params
            .iter()
            .zip(z)
            .map(|(&p, &zi)| self.priors.log_density(p, zi))
            .sum()
    }
}
