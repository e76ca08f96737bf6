//! Penalized trend: thin-plate spatial smooth, periodic cubic temporal smooth,
//! their tensor interaction, penalties and the coefficient prior precision.
//!
//! Temporal smooths are parameterized on the unit period `u = d / 365`, so
//! their penalty is `int_0^1 g''(u)^2 du`. The spatial smooth works in km.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::SparseSymmetric;
use crate::data::{day_of_year, Day, SpacePoint, DAYS_PER_YEAR};
use crate::hyper::HyperParams;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("need at least {need} {what} knots, got {got}")]
    TooFewKnots { what: &'static str, need: usize, got: usize },
    #[error("spatial knots are collinear; the thin-plate side conditions are singular")]
    DegenerateKnots,
    #[error("smoothing variance {0} must be positive")]
    NonPositiveVariance(&'static str),
    #[error("covariate row has length {got}, expected {expected}")]
    CovariateLength { got: usize, expected: usize },
    #[error("knot file {path}: {message}")]
    KnotFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub spatial_knots: usize,
    pub temporal_knots: usize,
    /// Include the space-time tensor interaction.
    pub interaction: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            spatial_knots: 60,
            temporal_knots: 7,
            interaction: false,
        }
    }
}

/// Equally spaced temporal knots `365 j / k` on `[0, 365)`.
pub fn temporal_knot_days(k: usize) -> Vec<f64> {
    (0..k).map(|j| DAYS_PER_YEAR as f64 * j as f64 / k as f64).collect()
}

/// Thin-plate radial function `r^2 log r`, zero at `r = 0`.
#[inline]
pub fn thin_plate(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// `[x, y, phi(|s - k_1|), ..., phi(|s - k_K|)]` before any constraint.
pub fn spatial_basis_row(s: &SpacePoint, knots: &[SpacePoint]) -> Vec<f64> {
    let mut row = Vec::with_capacity(knots.len() + 2);
    row.push(s.x_km);
    row.push(s.y_km);
    row.extend(knots.iter().map(|k| thin_plate(s.distance(k))));
    row
}

/// `[d, |d - t_1|^3, ..., |d - t_K|^3]` before any constraint, in days.
pub fn temporal_basis_row(d: f64, knots: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(knots.len() + 1);
    row.push(d);
    row.extend(knots.iter().map(|t| (d - t).abs().powi(3)));
    row
}

/// Max-min (coffee-house) design: start from the candidate nearest the
/// centroid, then repeatedly add the candidate farthest from those chosen.
pub fn max_min_knots(candidates: &[SpacePoint], k: usize) -> Vec<SpacePoint> {
    let mut unique: Vec<SpacePoint> = Vec::new();
    for c in candidates {
        if !unique.iter().any(|u| u.distance(c) == 0.0) {
            unique.push(*c);
        }
    }
    if unique.is_empty() || k == 0 {
        return Vec::new();
    }
    let n = unique.len() as f64;
    let centroid = SpacePoint {
        x_km: unique.iter().map(|p| p.x_km).sum::<f64>() / n,
        y_km: unique.iter().map(|p| p.y_km).sum::<f64>() / n,
    };
    let first = (0..unique.len())
        .min_by(|&a, &b| {
            unique[a]
                .distance(&centroid)
                .total_cmp(&unique[b].distance(&centroid))
        })
        .unwrap();
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = unique.iter().map(|p| p.distance(&unique[first])).collect();
    while chosen.len() < k.min(unique.len()) {
        let next = (0..unique.len())
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .unwrap();
        chosen.push(next);
        for (i, p) in unique.iter().enumerate() {
            nearest[i] = nearest[i].min(p.distance(&unique[next]));
        }
    }
    chosen.into_iter().map(|i| unique[i]).collect()
}

pub fn write_knots(path: &Path, knots: &[SpacePoint]) -> Result<(), SmoothError> {
    let err = |e: std::io::Error| SmoothError::KnotFile {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    writeln!(w, "x_km,y_km").map_err(err)?;
    for k in knots {
        writeln!(w, "{},{}", k.x_km, k.y_km).map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn read_knots(path: &Path) -> Result<Vec<SpacePoint>, SmoothError> {
    let err = |message: String| SmoothError::KnotFile {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let parse = |i: usize| -> Result<f64, SmoothError> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad coordinate in column {}", i + 1)))
        };
        out.push(SpacePoint {
            x_km: parse(0)?,
            y_km: parse(1)?,
        });
    }
    Ok(out)
}

/// Orthonormal basis of the null space of `c` (rows are constraints), from a
/// column-pivoted Householder QR of `c^T`.
pub fn null_space(c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (m, n) = c.shape();
    let mut a = c.transpose();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(m);
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for k in 0..m {
        // pivot the remaining constraint with the largest residual norm
        let (piv, norm) = (k..m)
            .map(|j| (j, a.view((k, j), (n - k, 1)).norm()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if norm <= 1e-12 * scale * (n as f64).sqrt() {
            return None;
        }
        a.swap_columns(k, piv);
        let x = a.view((k, k), (n - k, 1)).clone_owned();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = DVector::zeros(n);
        for i in k..n {
            v[i] = x[i - k];
        }
        v[k] -= alpha;
        let vn = v.norm();
        v /= vn;
        let proj = v.transpose() * &a;
        a -= &v * proj * 2.0;
        reflectors.push(v);
    }
    // Q = H_1 H_2 ... H_m; the trailing columns span the null space.
    let mut z = DMatrix::zeros(n, n - m);
    for j in 0..n - m {
        z[(m + j, j)] = 1.0;
    }
    for v in reflectors.iter().rev() {
        let proj = v.transpose() * &z;
        z -= v * proj * 2.0;
    }
    Some(z)
}

/// Linear map from free coefficients to the (scaled) raw temporal
/// coefficients that enforces periodicity in value and first derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMap {
    /// Knots on the unit period.
    pub knots: Vec<f64>,
    /// `raw_dim x free_dim`, acting on the unit-period basis `[u, |u - tau_j|^3]`.
    pub z: DMatrix<f64>,
}

impl ConstraintMap {
    pub fn periodic(knot_days: &[f64]) -> Result<Self, SmoothError> {
        if knot_days.len() < 2 {
            return Err(SmoothError::TooFewKnots {
                what: "temporal",
                need: 2,
                got: knot_days.len(),
            });
        }
        let knots: Vec<f64> = knot_days.iter().map(|t| t / DAYS_PER_YEAR as f64).collect();
        let raw = knots.len() + 1;
        let mut c = DMatrix::zeros(2, raw);
        // g(1) - g(0) = 0 and g'(1) - g'(0) = 0 on the unit period
        c[(0, 0)] = 1.0;
        c[(1, 0)] = 0.0;
        for (j, &t) in knots.iter().enumerate() {
            c[(0, j + 1)] = (1.0 - t).powi(3) - t.powi(3);
            c[(1, j + 1)] = 3.0 * (1.0 - t).powi(2) + 3.0 * t * t;
        }
        let z = null_space(&c).expect("periodicity constraints have full rank");
        Ok(Self { knots, z })
    }

    pub fn raw_dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn free_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Unit-period basis `[u, |u - tau_j|^3]`.
    pub fn scaled_row(&self, u: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.raw_dim());
        row.push(u);
        row.extend(self.knots.iter().map(|t| (u - t).abs().powi(3)));
        row
    }

    /// Free basis values at day-of-year `d` (any real, not wrapped).
    pub fn free_row(&self, d: f64) -> Vec<f64> {
        let b = self.scaled_row(d / DAYS_PER_YEAR as f64);
        (0..self.free_dim())
            .map(|j| (0..b.len()).map(|i| b[i] * self.z[(i, j)]).sum())
            .collect()
    }

    /// Coefficients on the day-unit basis of [`temporal_basis_row`].
    pub fn free_to_raw(&self, free: &[f64]) -> Vec<f64> {
        let y = DAYS_PER_YEAR as f64;
        let scaled = &self.z * DVector::from_column_slice(free);
        scaled
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 { v / y } else { v / (y * y * y) })
            .collect()
    }

    /// `int_0^1 g''(u)^2 du` on the unit-period basis; the linear column is unpenalized.
    pub fn raw_penalty(&self) -> DMatrix<f64> {
        let k = self.knots.len();
        let mut m = DMatrix::zeros(k + 1, k + 1);
        let mut breaks: Vec<f64> = self.knots.clone();
        breaks.push(0.0);
        breaks.push(1.0);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        for a in 0..k {
            for b in 0..=a {
                let (ta, tb) = (self.knots[a], self.knots[b]);
                let f = |u: f64| 36.0 * (u - ta).abs() * (u - tb).abs();
                // piecewise quadratic: Simpson is exact on each piece
                let v: f64 = breaks
                    .windows(2)
                    .map(|w| (w[1] - w[0]) / 6.0 * (f(w[0]) + 4.0 * f(0.5 * (w[0] + w[1])) + f(w[1])))
                    .sum();
                m[(a + 1, b + 1)] = v;
                m[(b + 1, a + 1)] = v;
            }
        }
        m
    }

    pub fn free_penalty(&self) -> DMatrix<f64> {
        symmetrize(self.z.transpose() * self.raw_penalty() * &self.z)
    }

    /// `int_0^1 B(u) B(u)^T du` over the free basis.
    pub fn free_gram(&self) -> DMatrix<f64> {
        let mut breaks: Vec<f64> = self.knots.clone();
        breaks.push(0.0);
        breaks.push(1.0);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let p = self.free_dim();
        let mut g = DMatrix::zeros(p, p);
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for (node, weight) in GAUSS_LEGENDRE_4 {
                let u = 0.5 * (hi - lo) * node + 0.5 * (hi + lo);
                let b = DVector::from_vec(self.free_row(u * DAYS_PER_YEAR as f64));
                g += &b * b.transpose() * (0.5 * (hi - lo) * weight);
            }
        }
        symmetrize(g)
    }
}

const GAUSS_LEGENDRE_4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Penalty matrices over the free coefficient blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBundle {
    pub spatial: DMatrix<f64>,
    pub temporal: DMatrix<f64>,
    pub tensor_spatial: Option<DMatrix<f64>>,
    pub tensor_temporal: Option<DMatrix<f64>>,
}

/// Column ranges of the trend coefficients `w`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub covariates: Range<usize>,
    pub spatial: Range<usize>,
    pub temporal: Range<usize>,
    pub tensor: Option<Range<usize>>,
}

impl BlockLayout {
    pub fn width(&self) -> usize {
        self.tensor.as_ref().map_or(self.temporal.end, |t| t.end)
    }
}

/// Everything needed to evaluate trend rows and penalties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub spec: BasisSpec,
    pub knots: Vec<SpacePoint>,
    pub temporal_knots: Vec<f64>,
    /// Null space of the thin-plate side conditions, `K x (K - 3)`.
    pub spatial_null: DMatrix<f64>,
    pub temporal: ConstraintMap,
    pub penalties: PenaltyBundle,
    pub layout: BlockLayout,
    /// Unpenalized directions get this ridge in the prior.
    pub spatial_unpenalized: usize,
}

impl SmoothBasis {
    /// Build with knots chosen from `sites` by the max-min design.
    pub fn from_sites(spec: BasisSpec, sites: &[SpacePoint], n_covariates: usize) -> Result<Self, SmoothError> {
        let knots = max_min_knots(sites, spec.spatial_knots);
        if knots.len() < spec.spatial_knots {
            log::warn!(
                "only {} distinct site locations available for {} spatial knots",
                knots.len(),
                spec.spatial_knots
            );
        }
        Self::with_knots(spec, knots, n_covariates)
    }

    pub fn with_knots(spec: BasisSpec, knots: Vec<SpacePoint>, n_covariates: usize) -> Result<Self, SmoothError> {
        if knots.len() < 3 {
            return Err(SmoothError::TooFewKnots {
                what: "spatial",
                need: 3,
                got: knots.len(),
            });
        }
        let k = knots.len();
        let mut t = DMatrix::zeros(3, k);
        for (j, p) in knots.iter().enumerate() {
            t[(0, j)] = 1.0;
            t[(1, j)] = p.x_km;
            t[(2, j)] = p.y_km;
        }
        let spatial_null = null_space(&t).ok_or(SmoothError::DegenerateKnots)?;
        let temporal_knots = temporal_knot_days(spec.temporal_knots);
        let temporal = ConstraintMap::periodic(&temporal_knots)?;

        let mut phi = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                phi[(a, b)] = thin_plate(knots[a].distance(&knots[b]));
            }
        }
        let bending = symmetrize(spatial_null.transpose() * phi * &spatial_null * (8.0 * std::f64::consts::PI));
        let ps = 2 + bending.nrows();
        let mut m_s = DMatrix::zeros(ps, ps);
        m_s.view_mut((2, 2), bending.shape()).copy_from(&bending);
        let m_t = temporal.free_penalty();
        let pt = m_t.nrows();

        let (tensor_spatial, tensor_temporal) = if spec.interaction {
            let g_t = temporal.free_gram();
            let mut g_s = DMatrix::zeros(ps, ps);
            for kn in &knots {
                let a = DVector::from_vec(free_spatial_row(kn, &knots, &spatial_null));
                g_s += &a * a.transpose();
            }
            g_s /= k as f64;
            (Some(m_s.kronecker(&g_t)), Some(symmetrize(g_s).kronecker(&m_t)))
        } else {
            (None, None)
        };

        let covariates = 0..n_covariates;
        let spatial = covariates.end..covariates.end + ps;
        let temporal_range = spatial.end..spatial.end + pt;
        let tensor = spec
            .interaction
            .then(|| temporal_range.end..temporal_range.end + ps * pt);
        Ok(Self {
            spec,
            knots,
            temporal_knots,
            spatial_null,
            temporal,
            penalties: PenaltyBundle {
                spatial: m_s,
                temporal: m_t,
                tensor_spatial,
                tensor_temporal,
            },
            layout: BlockLayout {
                covariates,
                spatial,
                temporal: temporal_range,
                tensor,
            },
            spatial_unpenalized: 2,
        })
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn spatial_free_row(&self, s: &SpacePoint) -> Vec<f64> {
        free_spatial_row(s, &self.knots, &self.spatial_null)
    }

    pub fn temporal_free_row(&self, d: f64) -> Vec<f64> {
        self.temporal.free_row(d)
    }

    /// Full trend row `c(s, t)` for covariate values `x`.
    pub fn design_row(&self, s: &SpacePoint, t: Day, x: &[f64]) -> Result<Vec<f64>, SmoothError> {
        let expected = self.layout.covariates.len();
        if x.len() != expected {
            return Err(SmoothError::CovariateLength { got: x.len(), expected });
        }
        let a = self.spatial_free_row(s);
        let b = self.temporal_free_row(day_of_year(t) as f64);
        let mut row = Vec::with_capacity(self.width());
        row.extend_from_slice(x);
        row.extend_from_slice(&a);
        row.extend_from_slice(&b);
        if self.spec.interaction {
            for ai in &a {
                row.extend(b.iter().map(|bj| ai * bj));
            }
        }
        Ok(row)
    }

    /// Prior precision of `w`: ridge `delta` on covariates and the linear
    /// spatial terms, scaled penalties elsewhere.
    pub fn prior_precision(&self, hyper: &HyperParams, delta: f64) -> Result<SparseSymmetric, SmoothError> {
        Ok(SparseSymmetric::from_dense(&self.prior_precision_dense(hyper, delta)?))
    }

    pub fn prior_precision_dense(&self, hyper: &HyperParams, delta: f64) -> Result<DMatrix<f64>, SmoothError> {
        let check = |v: f64, name| if v > 0.0 { Ok(v) } else { Err(SmoothError::NonPositiveVariance(name)) };
        let tau_s = check(hyper.tau2_s, "tau2_s")?;
        let tau_t = check(hyper.tau2_t, "tau2_t")?;
        let p = self.width();
        let mut q = DMatrix::zeros(p, p);
        for i in self.layout.covariates.clone() {
            q[(i, i)] = delta;
        }
        let s0 = self.layout.spatial.start;
        let ps = self.layout.spatial.len();
        q.view_mut((s0, s0), (ps, ps)).copy_from(&(&self.penalties.spatial / tau_s));
        for i in 0..self.spatial_unpenalized {
            q[(s0 + i, s0 + i)] += delta;
        }
        let t0 = self.layout.temporal.start;
        let pt = self.layout.temporal.len();
        q.view_mut((t0, t0), (pt, pt)).copy_from(&(&self.penalties.temporal / tau_t));
        if let (Some(r), Some(ms), Some(mt)) = (
            &self.layout.tensor,
            &self.penalties.tensor_spatial,
            &self.penalties.tensor_temporal,
        ) {
            let a = check(hyper.tau2_st_s, "tau2_st_s")?;
            let b = check(hyper.tau2_st_t, "tau2_st_t")?;
            let block = ms / a + mt / b;
            q.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&block);
        }
        Ok(q)
    }

    /// Evaluates the temporal smooth for free coefficients at day `d`.
    pub fn temporal_value(&self, free: &[f64], d: f64) -> f64 {
        self.temporal_free_row(d).iter().zip(free).map(|(a, b)| a * b).sum()
    }
}

fn free_spatial_row(s: &SpacePoint, knots: &[SpacePoint], null: &DMatrix<f64>) -> Vec<f64> {
    let raw = spatial_basis_row(s, knots);
    let mut row = Vec::with_capacity(2 + null.ncols());
    row.push(raw[0]);
    row.push(raw[1]);
    for j in 0..null.ncols() {
        row.push((0..knots.len()).map(|i| raw[2 + i] * null[(i, j)]).sum());
    }
    row
}
