//! Linearized versus exact nonlinear posterior for a small model without the
//! short-range process.
//!
//! The reference sampler draws trend coefficients, the two population
//! intercepts and the hyperparameters jointly, with household intercepts
//! integrated out analytically.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ReadingKind};
use crate::fit::{fit, mode_proposal, percentile, FitError, FitOptions, FitResult};
use crate::hyper::{HyperParams, ModelFlags, Param};
use crate::inference::{adaptive_rwmh, ess, AdaptConfig, Chain, InferenceError, SamplerSettings};
use crate::joint::{AssembledSystem, JointError};
use crate::observation::g_aggregate;
use crate::prediction::PredictionGrid;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("comparison needs a model without u or the long-range interaction, got {0}")]
    Model(String),
    #[error("no linearized draws were retained")]
    NoDraws,
    #[error("trend row: {0}")]
    Trend(String),
}

/// Exact log posterior of `(w, indoor intercept, aggregate intercept, z)`.
pub struct NonlinearTarget<'a> {
    sys: &'a AssembledSystem,
    n_coef: usize,
    /// Rows of each indoor household.
    households: Vec<Vec<usize>>,
}

impl<'a> NonlinearTarget<'a> {
    pub fn new(sys: &'a AssembledSystem) -> Result<Self, CompareError> {
        if sys.config.flags.u || sys.config.flags.gst {
            return Err(CompareError::Model(sys.config.flags.label()));
        }
        let mut households = vec![Vec::new(); sys.layout.household_sites.len()];
        for (a, r) in sys.rows.iter().enumerate() {
            if let Some(h) = r.household {
                households[h].push(a);
            }
        }
        Ok(Self {
            sys,
            n_coef: sys.layout.households.start,
            households,
        })
    }

    /// Number of coefficient coordinates ahead of the hyperparameters.
    pub fn n_coef(&self) -> usize {
        self.n_coef
    }

    pub fn dim(&self) -> usize {
        self.n_coef + self.sys.space.dim()
    }

    pub fn names(&self) -> Vec<String> {
        let l = &self.sys.layout.trend;
        let schema = self.sys.basis.layout.covariates.clone();
        let mut out: Vec<String> = schema.map(|j| format!("covariate{j}")).collect();
        out.extend(l.spatial.clone().map(|j| format!("spatial{}", j - l.spatial.start)));
        out.extend(l.temporal.clone().map(|j| format!("temporal{}", j - l.temporal.start)));
        if let Some(t) = &l.tensor {
            out.extend(t.clone().map(|j| format!("tensor{}", j - t.start)));
        }
        if self.sys.layout.indoor.is_some() {
            out.push("indoor_intercept".into());
        }
        if self.sys.layout.aggregate.is_some() {
            out.push("aggregate_intercept".into());
        }
        out.extend(self.sys.space.names().iter().map(|s| s.to_string()));
        out
    }

    /// Log posterior up to a constant common to both models; `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let (coef, z) = theta.split_at(self.n_coef);
        let prior = self.sys.space.log_prior(z);
        if !prior.is_finite() {
            return f64::NEG_INFINITY;
        }
        let Ok(h) = self.sys.space.from_vector(z) else {
            return f64::NEG_INFINITY;
        };
        let Some(lp) = self.log_coef_prior(coef, &h) else {
            return f64::NEG_INFINITY;
        };
        match self.log_likelihood(coef, &h) {
            Some(ll) if ll.is_finite() => ll + lp + prior,
            _ => f64::NEG_INFINITY,
        }
    }

    fn log_coef_prior(&self, coef: &[f64], h: &HyperParams) -> Option<f64> {
        let q = self.sys.prior_precision(h).ok()?;
        let q = q.view((0, 0), (self.n_coef, self.n_coef)).into_owned();
        let c = Cholesky::new(q.clone())?;
        let v = DVector::from_column_slice(coef);
        let log_det: f64 = 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(0.5 * (log_det - self.n_coef as f64 * LN_2PI - (v.transpose() * &q * &v)[0]))
    }

    fn log_likelihood(&self, coef: &[f64], h: &HyperParams) -> Option<f64> {
        let sys = self.sys;
        let pw = sys.layout.trend_width();
        let w = DVector::from_column_slice(&coef[..pw]);
        let eta = &sys.entry_trend * &w;
        let indoor = sys.layout.indoor.map_or(0.0, |i| coef[i]);
        let aggregate = sys.layout.aggregate.map_or(0.0, |i| coef[i]);
        let gauss = |r: f64, var: f64| -0.5 * (LN_2PI + var.ln() + r * r / var);

        let mut ll = 0.0;
        for row in &sys.rows {
            match row.kind {
                ReadingKind::Bco => ll += gauss(row.y - eta[row.entries.start], h.sigma2_o),
                ReadingKind::Bca => {
                    let g = g_aggregate(&eta.as_slice()[row.entries.clone()], h.alpha_1a).ok()?;
                    ll += gauss(row.y - aggregate - g, h.sigma2_a + h.sigma2_alpha0);
                }
                ReadingKind::Bci => {}
            }
        }
        // equicorrelated block per household
        let (s2, t2) = (h.sigma2_i, h.sigma2_alpha0);
        for rows in &self.households {
            let m = rows.len() as f64;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for &a in rows {
                let row = &sys.rows[a];
                let r = row.y - indoor - h.alpha_1i * eta[row.entries.start];
                sum += r;
                sq += r * r;
            }
            let log_det = m * s2.ln() + (1.0 + m * t2 / s2).ln();
            let quad = sq / s2 - t2 * sum * sum / (s2 * (s2 + m * t2));
            ll += -0.5 * (m * LN_2PI + log_det + quad);
        }
        Some(ll)
    }

    /// Coefficient part of the linearized conditional mean at `h`, followed by `z`.
    pub fn point_from_linearized(&self, v: &DVector<f64>, z: &[f64]) -> Vec<f64> {
        v.iter().take(self.n_coef).copied().chain(z.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Linearized fit; its model flags are forced to `U=0, GST=0, A=1`.
    pub linearized: FitOptions,
    pub nonlinear_chains: usize,
    pub nonlinear_iters: usize,
    pub nonlinear_burn_in: usize,
    /// Keep every `thin`-th post-burn-in nonlinear state for predictions.
    pub nonlinear_thin: usize,
    pub seed: u64,
    pub max_rhat: f64,
    pub min_ess: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        let mut linearized = FitOptions {
            chains: 4,
            iters: 12_500,
            burn_in: 2_500,
            thin: 10,
            ..FitOptions::default()
        };
        linearized.model.flags = ModelFlags {
            u: false,
            gst: false,
            a: true,
        };
        Self {
            linearized,
            nonlinear_chains: 4,
            nonlinear_iters: 200_000,
            nonlinear_burn_in: 25_000,
            nonlinear_thin: 50,
            seed: 1,
            max_rhat: 1.1,
            min_ess: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamComparison {
    pub name: String,
    pub linearized_mean: f64,
    pub linearized_sd: f64,
    pub nonlinear_mean: f64,
    pub nonlinear_sd: f64,
    /// `|mean difference| / nonlinear sd`.
    pub standardized_difference: f64,
    pub nonlinear_ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub params: Vec<ParamComparison>,
    /// Prediction correlation on the log scale.
    pub log_correlation: f64,
    pub original_correlation: f64,
    /// 90/95/99th percentiles of the original-scale relative prediction error.
    pub relative_error_quantiles: [f64; 3],
    pub linearized_acceptance: f64,
    pub nonlinear_acceptance: f64,
    /// Lag-one autocorrelation of the nonlinear log target, per chain.
    pub nonlinear_log_target_lag1: Vec<f64>,
    /// Set when any reference coordinate fails the R-hat or ESS bounds.
    pub convergence_flagged: bool,
}

impl CompareReport {
    /// Largest standardized mean difference, skipping the named parameters.
    pub fn max_difference_excluding(&self, skip: &[&str]) -> f64 {
        self.params
            .iter()
            .filter(|p| !skip.contains(&p.name.as_str()))
            .map(|p| p.standardized_difference)
            .fold(0.0, f64::max)
    }
}

/// Gelman-Rubin potential scale reduction over equal-length sequences.
pub fn rhat(seqs: &[Vec<f64>]) -> f64 {
    let m = seqs.len();
    let n = seqs.iter().map(Vec::len).min().unwrap_or(0);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = seqs.iter().map(|s| s[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1) as f64 / n as f64 * w + b / n as f64) / w).sqrt()
}

pub fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 3 {
        return f64::NAN;
    }
    let mu = xs.iter().sum::<f64>() / n as f64;
    let c0: f64 = xs.iter().map(|x| (x - mu).powi(2)).sum();
    let c1: f64 = xs.windows(2).map(|w| (w[0] - mu) * (w[1] - mu)).sum();
    c1 / c0
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let n = a.len() as f64;
    let c = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    c / (sa * sb)
}

/// Reference sampler on the exact model, started from the linearized mode.
pub fn sample_nonlinear(
    target: &NonlinearTarget<'_>,
    linear: &FitResult,
    sys: &AssembledSystem,
    opts: &CompareOptions,
) -> Result<Vec<Chain>, CompareError> {
    let nc = target.n_coef();
    let d = target.dim();
    let start = target.point_from_linearized(&DVector::from_vec(linear.v_hat.clone()), &linear.mode.z);

    // block-diagonal starting proposal from the linearized curvature
    let mut cov = DMatrix::zeros(d, d);
    let cond = sys.conditional_v(&linear.mode_hyper)?.covariance();
    cov.view_mut((0, 0), (nc, nc)).copy_from(&cond.view((0, 0), (nc, nc)));
    let gz = mode_proposal(sys, &linear.mode.z) / (2.38 * 2.38 / sys.space.dim() as f64);
    cov.view_mut((nc, nc), (d - nc, d - nc)).copy_from(&gz);
    let cov = cov * (2.38 * 2.38 / d as f64);
    let chol = cov.clone().cholesky().map(|c| c.l());

    let f = |x: &[f64]| target.log_density(x);
    (0..opts.nonlinear_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0a11);
            rng.set_stream(c as u64);
            let mut init = start.clone();
            if let Some(l) = &chol {
                for _ in 0..20 {
                    let e = DVector::from_fn(d, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
                    let cand: Vec<f64> = start.iter().zip((l * e).iter()).map(|(a, b)| a + b).collect();
                    if f(&cand).is_finite() {
                        init = cand;
                        break;
                    }
                }
            }
            let settings = SamplerSettings {
                n_iter: opts.nonlinear_iters,
                adapt: AdaptConfig::default(),
                initial_cov: Some(cov.clone()),
                checkpoint: None,
            };
            adaptive_rwmh(&f, &init, &settings, opts.seed ^ 0x0a11, 100 + c as u64).map_err(CompareError::from)
        })
        .collect()
}

/// Trend rows of the grid points.
fn grid_design(sys: &AssembledSystem, grid: &PredictionGrid) -> Result<DMatrix<f64>, CompareError> {
    let pw = sys.layout.trend_width();
    let mut c = DMatrix::zeros(grid.len(), pw);
    for (i, q) in grid.points.iter().enumerate() {
        let row = sys
            .basis
            .design_row(&q.point, q.day, &q.covariates)
            .map_err(|e| CompareError::Trend(e.to_string()))?;
        for (j, v) in row.iter().enumerate() {
            c[(i, j)] = *v;
        }
    }
    Ok(c)
}

/// Posterior means of `eta` and `exp(eta)` at the grid from coefficient draws (one per column).
fn predictive_means(c: &DMatrix<f64>, w: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let eta = c * w;
    let k = w.ncols() as f64;
    let log_mean = eta.row_iter().map(|r| r.sum() / k).collect();
    let orig_mean = eta.row_iter().map(|r| r.iter().map(|e| e.exp()).sum::<f64>() / k).collect();
    (log_mean, orig_mean)
}

/// Run both posteriors on `dataset` and summarise their agreement on `grid`.
pub fn compare_linearized_nonlinear(
    dataset: &Dataset,
    grid: &PredictionGrid,
    opts: &CompareOptions,
) -> Result<CompareReport, CompareError> {
    let mut lin_opts = opts.linearized.clone();
    lin_opts.model.flags = ModelFlags {
        u: false,
        gst: false,
        a: true,
    };
    let (linear, sys) = fit(dataset, &lin_opts)?;
    if linear.draws.is_empty() {
        return Err(CompareError::NoDraws);
    }
    let target = NonlinearTarget::new(&sys)?;
    let chains = sample_nonlinear(&target, &linear, &sys, opts)?;
    let nc = target.n_coef();
    let pw = sys.layout.trend_width();
    let names = target.names();

    // linearized draws on the natural scale, aligned with the target coordinates
    let lin_draws: Vec<Vec<f64>> = linear
        .draws
        .iter()
        .map(|dr| {
            let z = &linear.chains[dr.chain].states[dr.iteration];
            dr.v[..nc].iter().copied().chain(z.iter().copied()).collect()
        })
        .collect();
    let natural = |k: usize, x: f64| -> f64 {
        if k >= nc && sys.space.params[k - nc].is_positive() {
            x.exp()
        } else {
            x
        }
    };

    let burn = opts.nonlinear_burn_in;
    let mut params = Vec::with_capacity(names.len());
    let mut flagged = false;
    for (k, name) in names.iter().enumerate() {
        let lin_x: Vec<f64> = lin_draws.iter().map(|t| natural(k, t[k])).collect();
        let per_chain: Vec<Vec<f64>> = chains
            .iter()
            .map(|ch| ch.retained(burn, 1).map(|i| natural(k, ch.states[i][k])).collect())
            .collect();
        let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let (lm, ls) = mean_sd(&lin_x);
        let (nm, ns) = mean_sd(&pooled);
        let e: f64 = per_chain
            .iter()
            .map(|s| ess(s).map(|e| e.value).unwrap_or(0.0))
            .sum();
        let r = rhat(&per_chain);
        if !(r <= opts.max_rhat) || e < opts.min_ess {
            flagged = true;
        }
        params.push(ParamComparison {
            name: name.clone(),
            linearized_mean: lm,
            linearized_sd: ls,
            nonlinear_mean: nm,
            nonlinear_sd: ns,
            standardized_difference: (lm - nm).abs() / ns,
            nonlinear_ess: e,
            rhat: r,
        });
    }
    if flagged {
        log::warn!("nonlinear reference chains did not meet the convergence bounds");
    }

    let c = grid_design(&sys, grid)?;
    let lin_w = DMatrix::from_fn(pw, lin_draws.len(), |j, i| lin_draws[i][j]);
    let thin = opts.nonlinear_thin.max(1);
    let kept: Vec<&Vec<f64>> = chains
        .iter()
        .flat_map(|ch| ch.retained(burn, thin).map(move |i| &ch.states[i]))
        .collect();
    let non_w = DMatrix::from_fn(pw, kept.len(), |j, i| kept[i][j]);
    let (lin_log, lin_orig) = predictive_means(&c, &lin_w);
    let (non_log, non_orig) = predictive_means(&c, &non_w);
    let mut rel: Vec<f64> = lin_orig
        .iter()
        .zip(&non_orig)
        .map(|(a, b)| (a - b).abs() / b)
        .collect();
    rel.sort_by(f64::total_cmp);

    let post_warmup = |ch: &Chain| ch.acceptance_rate();
    Ok(CompareReport {
        params,
        log_correlation: correlation(&lin_log, &non_log),
        original_correlation: correlation(&lin_orig, &non_orig),
        relative_error_quantiles: [percentile(&rel, 0.90), percentile(&rel, 0.95), percentile(&rel, 0.99)],
        linearized_acceptance: linear.chains.iter().map(post_warmup).sum::<f64>() / linear.chains.len() as f64,
        nonlinear_acceptance: chains.iter().map(post_warmup).sum::<f64>() / chains.len() as f64,
        nonlinear_log_target_lag1: chains
            .iter()
            .map(|ch| lag1_autocorrelation(&ch.log_post[burn.min(ch.len())..]))
            .collect(),
        convergence_flagged: flagged,
    })
}

/// The parameter whose posterior is expected to move under linearization.
pub fn aggregate_slope_name() -> &'static str {
    Param::Alpha1A.name()
}

impl CompareReport {
    pub fn format(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>10} {:>10} {:>10} {:>10} {:>7} {:>8} {:>6}",
            "parameter", "lin mean", "lin sd", "nl mean", "nl sd", "|d|/sd", "nl ess", "rhat"
        );
        for p in &self.params {
            let _ = writeln!(
                s,
                "{:<20} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>7.3} {:>8.0} {:>6.3}",
                p.name,
                p.linearized_mean,
                p.linearized_sd,
                p.nonlinear_mean,
                p.nonlinear_sd,
                p.standardized_difference,
                p.nonlinear_ess,
                p.rhat
            );
        }
        let _ = writeln!(s, "prediction correlation (log scale): {:.5}", self.log_correlation);
        let _ = writeln!(s, "prediction correlation (original scale): {:.5}", self.original_correlation);
        let q = self.relative_error_quantiles;
        let _ = writeln!(s, "relative error 90/95/99%: {:.4} {:.4} {:.4}", q[0], q[1], q[2]);
        let _ = writeln!(
            s,
            "acceptance: linearized {:.3}, nonlinear {:.3}",
            self.linearized_acceptance, self.nonlinear_acceptance
        );
        if self.convergence_flagged {
            let _ = writeln!(s, "WARNING: nonlinear chains failed the convergence bounds");
        }
        s
    }
}
