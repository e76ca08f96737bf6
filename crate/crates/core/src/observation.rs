//! Observation equations for the three reading kinds and the linearized
//! log-sum-exp aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MonitorReading, ReadingKind};
use crate::hyper::HyperParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("aggregation over an empty window")]
    EmptyWindow,
    #[error("aggregate reading needs a linearization")]
    MissingLinearization,
    #[error("linearization has {got} days but the reading spans {expected}")]
    SpanMismatch { got: usize, expected: usize },
    #[error("expansion point is not finite")]
    NonFinite,
}

/// `log sum_j exp(slope * eta_j)`, shifted by the maximum to avoid overflow.
pub fn g_aggregate(eta: &[f64], slope: f64) -> Result<f64, ObservationError> {
    if eta.is_empty() {
        return Err(ObservationError::EmptyWindow);
    }
    Ok(log_sum_exp_scaled(eta, slope))
}

fn log_sum_exp_scaled(eta: &[f64], slope: f64) -> f64 {
    let m = eta
        .iter()
        .map(|e| slope * e)
        .fold(f64::NEG_INFINITY, f64::max);
    m + eta.iter().map(|e| (slope * e - m).exp()).sum::<f64>().ln()
}

/// First-order expansion of the aggregation map about a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedAggregate {
    pub anchor: Vec<f64>,
    pub slope: f64,
    pub offset: f64,
    pub weights: Vec<f64>,
}

/// Weights `slope * softmax(slope * anchor)` and offset `g(anchor) - weights . anchor`.
pub fn linearize_aggregate(anchor: &[f64], slope: f64) -> Result<LinearizedAggregate, ObservationError> {
    if anchor.is_empty() {
        return Err(ObservationError::EmptyWindow);
    }
    if anchor.iter().any(|v| !v.is_finite()) || !slope.is_finite() {
        return Err(ObservationError::NonFinite);
    }
    let weights = softmax_weights(anchor, slope);
    let g = log_sum_exp_scaled(anchor, slope);
    let offset = g - weights.iter().zip(anchor).map(|(b, e)| b * e).sum::<f64>();
    Ok(LinearizedAggregate {
        anchor: anchor.to_vec(),
        slope,
        offset,
        weights,
    })
}

fn softmax_weights(anchor: &[f64], slope: f64) -> Vec<f64> {
    if anchor.iter().all(|&a| a == anchor[0]) {
        // exact equal weights for a flat anchor, so the naive case is bit-exact
        return vec![slope / anchor.len() as f64; anchor.len()];
    }
    let m = anchor
        .iter()
        .map(|e| slope * e)
        .fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = anchor.iter().map(|e| (slope * e - m).exp()).collect();
    let total: f64 = ex.iter().sum();
    ex.iter().map(|e| slope * e / total).collect()
}

/// Naive expansion at zero: offset `log J` and equal weights `slope / J`.
pub fn naive_linearization(span: usize, slope: f64) -> LinearizedAggregate {
    LinearizedAggregate {
        anchor: vec![0.0; span],
        slope,
        offset: (span as f64).ln(),
        weights: vec![slope / span as f64; span],
    }
}

/// Where a reading's coefficient columns point, beyond the trend row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterceptColumn {
    None,
    /// Indoor population intercept plus the household's own intercept.
    Household(usize),
    /// Population intercept of the aggregate readings.
    Aggregate,
}

/// One reading's contribution to the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    /// Fixed term moved to the response side.
    pub offset: f64,
    /// Weight on each latent day of the reading, in day order.
    pub latent_weights: Vec<f64>,
    pub intercept: InterceptColumn,
    pub error_variance: f64,
}

/// Observation equation of `reading`. `household` indexes the indoor site among
/// indoor households.
pub fn observation_row(
    reading: &MonitorReading,
    household: Option<usize>,
    lin: Option<&LinearizedAggregate>,
    hyper: &HyperParams,
) -> Result<ObservationRow, ObservationError> {
    Ok(match reading.kind {
        ReadingKind::Bco => ObservationRow {
            offset: 0.0,
            latent_weights: vec![1.0],
            intercept: InterceptColumn::None,
            error_variance: hyper.sigma2_o,
        },
        ReadingKind::Bci => ObservationRow {
            offset: 0.0,
            latent_weights: vec![hyper.alpha_1i],
            intercept: InterceptColumn::Household(household.unwrap_or(0)),
            error_variance: hyper.sigma2_i,
        },
        ReadingKind::Bca => {
            let lin = lin.ok_or(ObservationError::MissingLinearization)?;
            let span = reading.span_days as usize;
            if lin.weights.len() != span {
                return Err(ObservationError::SpanMismatch {
                    got: lin.weights.len(),
                    expected: span,
                });
            }
            ObservationRow {
                offset: lin.offset,
                latent_weights: lin.weights.clone(),
                intercept: InterceptColumn::Aggregate,
                error_variance: hyper.sigma2_a + hyper.sigma2_alpha0,
            }
        }
    })
}
