use serde::{Deserialize, Serialize};

use super::InferenceError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub value: f64,
    /// Set for a constant sequence, where the estimate is reported as zero.
    pub degenerate: bool,
}

const MIN_LENGTH: usize = 100;

/// Effective sample size by the initial positive sequence estimator.
pub fn ess(x: &[f64]) -> Result<EssEstimate, InferenceError> {
    let n = x.len();
    if n < MIN_LENGTH {
        return Err(InferenceError::ChainTooShort { got: n, need: MIN_LENGTH });
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = autocov(0);
    if !(c0 > 0.0) || c0 <= 1e-300 {
        return Ok(EssEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (autocov(2 * k) + autocov(2 * k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    Ok(EssEstimate {
        value: n as f64 / tau.max(1.0 / n as f64),
        degenerate: false,
    })
}
