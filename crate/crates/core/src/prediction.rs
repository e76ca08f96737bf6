//! Conditional prediction of the latent field at query points.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::KernelSpec;
use crate::data::{CovariateSchema, Dataset, Day, ReadingKind, SpacePoint};
use crate::hyper::HyperParams;
use crate::joint::{Anchors, AssembledSystem, GammaEval, JointError};

/// Largest grid for which the dense conditional covariance is formed.
pub const MAX_DENSE_GRID: usize = 4000;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Smooth(#[from] crate::smooth::SmoothError),
    #[error("grid of {0} points is too large for joint draws (limit {MAX_DENSE_GRID})")]
    GridTooLarge(usize),
    #[error("no posterior states supplied")]
    EmptyChain,
    #[error("grid file {path}: {message}")]
    GridFile { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub point: SpacePoint,
    pub day: Day,
    /// Expanded covariate row.
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub points: Vec<QueryPoint>,
    pub want_sd: bool,
}

impl PredictionGrid {
    /// Query points at `(site, day)` pairs of a dataset, using its covariates.
    /// `side x side` lattice over `[0, extent]^2` on each of `days`, all with the same covariate row.
    pub fn lattice(extent_km: f64, side: usize, days: &[Day], covariates: &[f64]) -> Self {
        let step = if side > 1 { extent_km / (side - 1) as f64 } else { 0.0 };
        let mut points = Vec::with_capacity(side * side * days.len());
        for &day in days {
            for i in 0..side {
                for j in 0..side {
                    points.push(QueryPoint {
                        point: SpacePoint::new(i as f64 * step, j as f64 * step),
                        day,
                        covariates: covariates.to_vec(),
                    });
                }
            }
        }
        Self { points, want_sd: false }
    }

    pub fn at_sites(dataset: &Dataset, pairs: &[(usize, Day)]) -> Result<Self, PredictionError> {
        let points = pairs
            .iter()
            .map(|&(s, d)| {
                Ok(QueryPoint {
                    point: dataset.sites[s].point,
                    day: d,
                    covariates: dataset.covariate_row(s, d)?.to_vec(),
                })
            })
            .collect::<Result<_, PredictionError>>()?;
        Ok(Self { points, want_sd: false })
    }

    /// Read `x_km,y_km,day` plus one column per base covariate of `schema`.
    pub fn read_csv(path: &Path, schema: &CovariateSchema) -> Result<Self, PredictionError> {
        let err = |message: String| PredictionError::GridFile {
            path: path.display().to_string(),
            message,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| err(format!("missing column {name}")))
        };
        let (cx, cy, cd) = (col("x_km")?, col("y_km")?, col("day")?);
        let base: Vec<usize> = schema.base.iter().map(|b| col(b)).collect::<Result<_, _>>()?;
        let mut points = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let num = |i: usize| -> Result<f64, PredictionError> {
                rec.get(i)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("row {}: {e}", line + 2)))
            };
            let day: Day = rec
                .get(cd)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| err(format!("row {}: {e}", line + 2)))?;
            let b: Vec<f64> = base.iter().map(|&i| num(i)).collect::<Result<_, _>>()?;
            points.push(QueryPoint {
                point: SpacePoint::new(num(cx)?, num(cy)?),
                day,
                covariates: schema.expand(&b)?,
            });
        }
        Ok(Self { points, want_sd: false })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub sd: Option<Vec<f64>>,
}

/// Write `x_km,y_km,day,mean[,sd]`.
pub fn write_predictions(path: &Path, grid: &PredictionGrid, pred: &Prediction) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if pred.sd.is_some() {
        w.write_record(["x_km", "y_km", "day", "mean", "sd"])?;
    } else {
        w.write_record(["x_km", "y_km", "day", "mean"])?;
    }
    for (i, q) in grid.points.iter().enumerate() {
        let mut rec = vec![
            q.point.x_km.to_string(),
            q.point.y_km.to_string(),
            q.day.to_string(),
            pred.mean[i].to_string(),
        ];
        if let Some(sd) = &pred.sd {
            rec.push(sd[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Cross-covariance machinery for one evaluated parameter value.
pub struct Kriging<'a> {
    sys: &'a AssembledSystem,
    eval: &'a GammaEval,
    kernel: Option<KernelSpec>,
    by_day: BTreeMap<Day, Vec<usize>>,
}

impl<'a> Kriging<'a> {
    pub fn new(sys: &'a AssembledSystem, eval: &'a GammaEval) -> Self {
        let kernel = (sys.config.flags.u && eval.hyper.sigma2_u > 0.0).then(|| sys.config.kernel(&eval.hyper));
        let mut by_day: BTreeMap<Day, Vec<usize>> = BTreeMap::new();
        if kernel.is_some() {
            for (e, &d) in sys.entry_day.iter().enumerate() {
                by_day.entry(d).or_default().push(e);
            }
        }
        Self {
            sys,
            eval,
            kernel,
            by_day,
        }
    }

    /// Nonzero entries of `Cov(u(q), residual rows)`.
    pub fn cross_cov(&self, q: &QueryPoint) -> Vec<(usize, f64)> {
        let Some(kernel) = &self.kernel else {
            return Vec::new();
        };
        let reach = (kernel.taper_range.ceil() as i64 - 1).max(0);
        let lo = (q.day as i64 - reach).max(0) as Day;
        let hi = (q.day as i64 + reach) as Day;
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (&d, entries) in self.by_day.range(lo..=hi) {
            let lag = (d as f64 - q.day as f64).abs();
            let t = kernel.temporal(lag);
            if t == 0.0 {
                continue;
            }
            for &e in entries {
                let row = self.sys.entry_row[e];
                let s = kernel.spatial(q.point.distance(&self.sys.rows[row].point));
                *acc.entry(row).or_insert(0.0) += self.eval.entry_weights[e] * kernel.sigma2_u * s * t;
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
    }

    pub fn trend(&self, q: &QueryPoint, v: &DVector<f64>) -> Result<f64, PredictionError> {
        let row = self.sys.basis.design_row(&q.point, q.day, &q.covariates)?;
        Ok(row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
    }

    /// `E(eta(q) | Y, v, gamma)` given precomputed `Sigma_Y^{-1}(r - H v)`.
    pub fn mean_with(&self, q: &QueryPoint, v: &DVector<f64>, weights: &DVector<f64>) -> Result<f64, PredictionError> {
        let k = self.cross_cov(q);
        Ok(self.trend(q, v)? + k.iter().map(|(a, c)| c * weights[*a]).sum::<f64>())
    }

    /// `Var(eta(q) | Y, v, gamma) = sigma2_u - k' Sigma_Y^{-1} k`.
    pub fn variance(&self, q: &QueryPoint) -> f64 {
        let Some(kernel) = &self.kernel else {
            return 0.0;
        };
        let k = self.cross_cov(q);
        if k.is_empty() {
            return kernel.sigma2_u;
        }
        let mut y = vec![0.0; self.sys.n_rows()];
        for (a, c) in &k {
            y[*a] = *c;
        }
        self.eval.sigma.forward_solve_in_place(&mut y);
        (kernel.sigma2_u - y.iter().map(|v| v * v).sum::<f64>()).max(0.0)
    }
}

/// Conditional mean of the latent field at `(v, gamma)`.
pub fn conditional_mean_eta(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    eval: &GammaEval,
    v: &DVector<f64>,
) -> Result<Vec<f64>, PredictionError> {
    let kr = Kriging::new(sys, eval);
    let weights = eval.kriging_weights(v);
    grid.points.par_iter().map(|q| kr.mean_with(q, v, &weights)).collect()
}

/// Conditional mean and, if the grid asks for it, standard deviation.
pub fn predict(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    eval: &GammaEval,
    v: &DVector<f64>,
) -> Result<Prediction, PredictionError> {
    let mean = conditional_mean_eta(grid, sys, eval, v)?;
    let sd = grid.want_sd.then(|| {
        let kr = Kriging::new(sys, eval);
        grid.points.par_iter().map(|q| kr.variance(q).sqrt()).collect()
    });
    Ok(Prediction { mean, sd })
}

/// Average of conditional means over posterior states `(gamma, v)`; the
/// standard deviation, when asked for, is that of the Gaussian mixture.
pub fn rao_blackwell(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    states: &[(HyperParams, DVector<f64>)],
) -> Result<Prediction, PredictionError> {
    if states.is_empty() {
        return Err(PredictionError::EmptyChain);
    }
    let m = grid.len();
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut var_sum = vec![0.0; m];
    for (h, v) in states {
        let eval = sys.evaluate(h)?;
        let mean = conditional_mean_eta(grid, sys, &eval, v)?;
        for i in 0..m {
            sum[i] += mean[i];
            sum_sq[i] += mean[i] * mean[i];
        }
        if grid.want_sd {
            let kr = Kriging::new(sys, &eval);
            let var: Vec<f64> = grid.points.par_iter().map(|q| kr.variance(q)).collect();
            for i in 0..m {
                var_sum[i] += var[i];
            }
        }
    }
    let n = states.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let sd = grid.want_sd.then(|| {
        (0..m)
            .map(|i| (var_sum[i] / n + (sum_sq[i] / n - mean[i] * mean[i]).max(0.0)).sqrt())
            .collect()
    });
    Ok(Prediction { mean, sd })
}

pub fn rao_blackwell_mean(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    states: &[(HyperParams, DVector<f64>)],
) -> Result<Vec<f64>, PredictionError> {
    let plain = PredictionGrid {
        points: grid.points.clone(),
        want_sd: false,
    };
    Ok(rao_blackwell(&plain, sys, states)?.mean)
}

/// Joint conditional covariance of the grid at `(v, gamma)`.
pub fn conditional_covariance(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    eval: &GammaEval,
) -> Result<DMatrix<f64>, PredictionError> {
    let m = grid.len();
    if m > MAX_DENSE_GRID {
        return Err(PredictionError::GridTooLarge(m));
    }
    let kr = Kriging::new(sys, eval);
    let mut cov = DMatrix::zeros(m, m);
    let Some(kernel) = &kr.kernel else {
        return Ok(cov);
    };
    let n = sys.n_rows();
    let mut lk = DMatrix::zeros(n, m);
    for (j, q) in grid.points.iter().enumerate() {
        let mut y = vec![0.0; n];
        for (a, c) in kr.cross_cov(q) {
            y[a] = c;
        }
        eval.sigma.forward_solve_in_place(&mut y);
        lk.column_mut(j).copy_from_slice(&y);
    }
    for i in 0..m {
        for j in 0..=i {
            let (a, b) = (&grid.points[i], &grid.points[j]);
            let lag = (a.day as f64 - b.day as f64).abs();
            let prior = kernel.covariance(a.point.distance(&b.point), lag);
            let c = prior - lk.column(i).dot(&lk.column(j));
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    Ok(cov)
}

/// `n` exact draws (rows) from the conditional of the latent field.
pub fn sample_eta(
    grid: &PredictionGrid,
    sys: &AssembledSystem,
    eval: &GammaEval,
    v: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>, PredictionError> {
    let mean = conditional_mean_eta(grid, sys, eval, v)?;
    let cov = conditional_covariance(grid, sys, eval)?;
    let m = grid.len();
    let scale = cov.diagonal().iter().fold(0.0f64, |a, b| a.max(*b));
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&mean);
    }
    if scale <= 0.0 {
        return Ok(out);
    }
    // conditional covariances can be rank deficient at observed points
    let mut jitter = 0.0;
    let factor = loop {
        let mut c = cov.clone();
        for k in 0..m {
            c[(k, k)] += jitter;
        }
        if let Some(ch) = c.cholesky() {
            break ch.l();
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &factor * z;
        for k in 0..m {
            out[(i, k)] += d[k];
        }
    }
    Ok(out)
}

/// Expansion points for the aggregate readings of `dataset`: the conditional
/// mean of the latent field on each reading's days under `sys` (usually the
/// daily-only system) at `(v, gamma)`.
pub fn blup_expansion_point(
    dataset: &Dataset,
    sys: &AssembledSystem,
    eval: &GammaEval,
    v: &DVector<f64>,
) -> Result<Anchors, PredictionError> {
    let mut pairs = Vec::new();
    let mut owners = Vec::new();
    for (i, r) in dataset.readings.iter().enumerate() {
        if r.kind == ReadingKind::Bca {
            for d in r.days() {
                pairs.push((r.site, d));
                owners.push(i);
            }
        }
    }
    let grid = PredictionGrid::at_sites(dataset, &pairs)?;
    let mean = conditional_mean_eta(&grid, sys, eval, v)?;
    let mut anchors = Anchors::new();
    for (i, value) in owners.into_iter().zip(mean) {
        anchors.entry(i).or_insert_with(Vec::new).push(value);
    }
    Ok(anchors)
}
