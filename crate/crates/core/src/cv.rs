//! Spatial cross-validation of held-out outdoor readings.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ReadingKind, SpacePoint};
use crate::fit::{fit_mode, FitError, FitOptions};
use crate::hyper::ModelFlags;
use crate::prediction::{Kriging, PredictionError, PredictionGrid};
use crate::scoring::{
    crps_gaussian, gaussian_interval, interval_score, prequential_score, spatial_partition, Partition,
    PartitionOptions, ScoringError,
};

#[derive(Debug, Error)]
pub enum CvError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("fold {0} has no validation readings")]
    EmptyFold(usize),
}

/// Scores of one set of held-out values (columns B to H).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub n: usize,
    pub mspe: f64,
    pub correlation: f64,
    pub coverage: f64,
    pub width: f64,
    pub interval: f64,
    pub crps: f64,
    pub log_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub flags: ModelFlags,
    pub folds: Vec<FoldScores>,
    /// Column-wise mean over folds.
    pub average: FoldScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub fit: FitOptions,
    pub alpha: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        let fit = FitOptions {
            chains: 0,
            ..FitOptions::default()
        };
        Self { fit, alpha: 0.05 }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

/// Score Gaussian predictive distributions `N(mean, sd^2)` against `observed`.
pub fn score_predictions(observed: &[f64], mean: &[f64], sd: &[f64], alpha: f64) -> Result<FoldScores, ScoringError> {
    let n = observed.len();
    let mut f = FoldScores {
        n,
        mspe: 0.0,
        correlation: pearson(observed, mean),
        coverage: 0.0,
        width: 0.0,
        interval: 0.0,
        crps: 0.0,
        log_score: 0.0,
    };
    for i in 0..n {
        let (x, m, s) = (observed[i], mean[i], sd[i]);
        let (lo, hi) = gaussian_interval(m, s, alpha);
        f.mspe += (x - m).powi(2);
        f.coverage += f64::from(lo <= x && x <= hi);
        f.width += hi - lo;
        f.interval += interval_score(lo, hi, x, alpha)?;
        f.crps += crps_gaussian(m, s, x)?;
        f.log_score += prequential_score(m, s * s, x)?;
    }
    let nf = n as f64;
    f.mspe /= nf;
    f.coverage /= nf;
    f.width /= nf;
    f.interval /= nf;
    f.crps /= nf;
    f.log_score /= nf;
    Ok(f)
}

fn average(folds: &[FoldScores]) -> FoldScores {
    let k = folds.len() as f64;
    let mean = |g: &dyn Fn(&FoldScores) -> f64| folds.iter().map(g).sum::<f64>() / k;
    FoldScores {
        n: folds.iter().map(|f| f.n).sum(),
        mspe: mean(&|f| f.mspe),
        correlation: mean(&|f| f.correlation),
        coverage: mean(&|f| f.coverage),
        width: mean(&|f| f.width),
        interval: mean(&|f| f.interval),
        crps: mean(&|f| f.crps),
        log_score: mean(&|f| f.log_score),
    }
}

/// Sites with outdoor readings and their outdoor reading counts.
pub fn outdoor_sites(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut counts = vec![0usize; dataset.sites.len()];
    for r in &dataset.readings {
        if r.kind == ReadingKind::Bco {
            counts[r.site] += 1;
        }
    }
    let sites: Vec<usize> = (0..dataset.sites.len()).filter(|&s| counts[s] > 0).collect();
    let c = sites.iter().map(|&s| counts[s]).collect();
    (sites, c)
}

/// Partition of the outdoor sites; groups hold dataset site indices.
pub fn cv_partition(dataset: &Dataset, opts: &PartitionOptions) -> Result<Partition, ScoringError> {
    let (sites, counts) = outdoor_sites(dataset);
    let pts: Vec<SpacePoint> = sites.iter().map(|&s| dataset.sites[s].point).collect();
    let p = spatial_partition(&pts, &counts, opts)?;
    Ok(Partition {
        groups: p
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| sites[i]).collect())
            .collect(),
        objective: p.objective,
    })
}

/// Fit by mode finding on each training split and score plug-in predictions
/// of the held-out outdoor readings.
pub fn run_cv(dataset: &Dataset, flags: ModelFlags, partition: &Partition, opts: &CvOptions) -> Result<ScoreReport, CvError> {
    let mut fit_opts = opts.fit.clone();
    fit_opts.model.flags = flags;
    let folds = partition
        .groups
        .par_iter()
        .enumerate()
        .map(|(k, group)| run_fold(dataset, group, &fit_opts, opts.alpha).map_err(|e| (k, e)))
        .collect::<Vec<_>>();
    let mut out = Vec::with_capacity(folds.len());
    for f in folds {
        match f {
            Ok(s) => out.push(s),
            Err((_, e)) => return Err(e),
        }
    }
    for (k, f) in out.iter().enumerate() {
        if f.n == 0 {
            return Err(CvError::EmptyFold(k));
        }
    }
    let average = average(&out);
    Ok(ScoreReport {
        flags,
        folds: out,
        average,
    })
}

fn run_fold(dataset: &Dataset, group: &[usize], opts: &FitOptions, alpha: f64) -> Result<FoldScores, CvError> {
    let held: Vec<(usize, u32, f64)> = dataset
        .readings
        .iter()
        .filter(|r| r.kind == ReadingKind::Bco && group.contains(&r.site))
        .map(|r| (r.site, r.start_day, r.y))
        .collect();
    if held.is_empty() {
        return Ok(FoldScores {
            n: 0,
            mspe: f64::NAN,
            correlation: f64::NAN,
            coverage: f64::NAN,
            width: f64::NAN,
            interval: f64::NAN,
            crps: f64::NAN,
            log_score: f64::NAN,
        });
    }
    let train = dataset.filter_readings(|r| !group.contains(&r.site));
    let mf = fit_mode(&train, opts)?;
    let pairs: Vec<(usize, u32)> = held.iter().map(|&(s, d, _)| (s, d)).collect();
    let grid = PredictionGrid::at_sites(dataset, &pairs)?;
    let kr = Kriging::new(&mf.system, &mf.eval);
    let v = &mf.eval.conditional.mean;
    let weights = mf.eval.kriging_weights(v);
    let mut mean = Vec::with_capacity(held.len());
    let mut sd = Vec::with_capacity(held.len());
    for q in &grid.points {
        mean.push(kr.mean_with(q, v, &weights)?);
        sd.push((kr.variance(q) + mf.hyper.sigma2_o).sqrt());
    }
    let observed: Vec<f64> = held.iter().map(|h| h.2).collect();
    Ok(score_predictions(&observed, &mean, &sd, alpha)?)
}

const HEADER: [&str; 13] = [
    "model", "U", "GST", "A", "fold", "n", "B_mspe", "C_corr", "D_coverage", "E_width", "F_interval", "G_crps",
    "H_log_score",
];

/// CSV with one row per fold and one `mean` row per report.
pub fn write_reports_csv<W: Write>(reports: &[ScoreReport], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HEADER)?;
    for r in reports {
        let rows = r
            .folds
            .iter()
            .enumerate()
            .map(|(k, f)| (k.to_string(), f))
            .chain(std::iter::once(("mean".to_string(), &r.average)));
        for (fold, f) in rows {
            wr.write_record([
                r.flags.label(),
                u8::from(r.flags.u).to_string(),
                u8::from(r.flags.gst).to_string(),
                u8::from(r.flags.a).to_string(),
                fold,
                f.n.to_string(),
                f.mspe.to_string(),
                f.correlation.to_string(),
                f.coverage.to_string(),
                f.width.to_string(),
                f.interval.to_string(),
                f.crps.to_string(),
                f.log_score.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Fold-averaged scores laid out as U, GST, A then columns B to H.
pub fn format_table(reports: &[ScoreReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>2} {:>4} {:>2} | {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "U", "GST", "A", "B", "C", "D", "E", "F", "G", "H"
    );
    for r in reports {
        let a = &r.average;
        let _ = writeln!(
            s,
            "{:>2} {:>4} {:>2} | {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            u8::from(r.flags.u),
            u8::from(r.flags.gst),
            u8::from(r.flags.a),
            a.mspe,
            a.correlation,
            a.coverage,
            a.width,
            a.interval,
            a.crps,
            a.log_score
        );
    }
    s
}
