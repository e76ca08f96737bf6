//! Space-time kernels and the sparse covariance of the short-range process.

pub mod bessel;
pub mod kernel;
pub mod sparse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Day, SpacePoint};

pub use kernel::{matern, tapered_temporal, KernelSpec};
pub use sparse::{CholeskyFactor, SparseSymmetric, SymbolicCholesky};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("{0} is not finite")]
    NonFinite(&'static str),
    #[error("{0} is negative")]
    Negative(&'static str),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("sparse structure: {0}")]
    Structure(String),
    #[error("empty point set")]
    Empty,
}

/// A latent location in space and time, tagged with the site it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub site: usize,
    pub point: SpacePoint,
    pub day: Day,
}

/// Stable permutation sorting points by `(day, site)`.
///
/// `perm[p]` is the original index placed at position `p`.
pub fn temporal_lexicographic_order(points: &[LatentPoint]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..points.len()).collect();
    perm.sort_by_key(|&i| (points[i].day, points[i].site));
    perm
}

/// Covariance of the short-range process at `points`, with pairs at lag
/// `>= taper_range` left out of the structure.
pub fn assemble_cov_u(points: &[LatentPoint], spec: &KernelSpec) -> Result<SparseSymmetric, CovarianceError> {
    if points.is_empty() {
        return Err(CovarianceError::Empty);
    }
    spec.validate()?;
    let n = points.len();
    let order = temporal_lexicographic_order(points);
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    // Sweep in time order; the window holds every earlier point within range.
    let mut lo = 0;
    for (p, &i) in order.iter().enumerate() {
        let ti = points[i].day as f64;
        while (ti - points[order[lo]].day as f64) >= spec.taper_range {
            lo += 1;
        }
        for &j in &order[lo..=p] {
            let h = (ti - points[j].day as f64).abs();
            let d = points[i].point.distance(&points[j].point);
            let v = spec.covariance(d, h);
            if i >= j {
                rows[i].push((j, v));
            } else {
                rows[j].push((i, v));
            }
        }
    }
    Ok(SparseSymmetric::from_lower_rows(rows))
}
