//! End-to-end posterior fit: mode finding, expansion points, chains and
//! composition draws.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ReadingKind, SpacePoint};
use crate::hyper::{HyperError, HyperParams, Param};
use crate::inference::{
    adaptive_rwmh, ess, maximize, numerical_hessian, AdaptConfig, Chain, Checkpointing, InferenceError, ModeOptions,
    ModeResult, SamplerSettings,
};
use crate::joint::{Anchors, AssembledSystem, GammaEval, JointError, ModelConfig};
use crate::prediction::{blup_expansion_point, PredictionError};
use crate::smooth::{SmoothBasis, SmoothError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Hyper(#[from] HyperError),
    #[error("dataset has no daily readings")]
    NoDailyData,
    #[error("archive {path}: {message}")]
    Archive { path: String, message: String },
}

/// Where aggregate readings are linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Conditional mean from a fit to the daily readings only.
    #[default]
    Blup,
    /// Expansion about zero.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub model: ModelConfig,
    pub chains: usize,
    pub iters: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th retained state for composition draws; 0 skips them.
    pub thin: usize,
    pub seed: u64,
    pub adapt: AdaptConfig,
    pub mode: ModeOptions,
    /// Starting point of the mode search and value of unsampled parameters.
    pub init: HyperParams,
    pub anchor: AnchorMode,
    /// Knots to use instead of placing them on the training sites.
    pub knots: Option<Vec<SpacePoint>>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            chains: 4,
            iters: 12_500,
            burn_in: 2_500,
            thin: 10,
            seed: 1,
            adapt: AdaptConfig::default(),
            mode: ModeOptions::default(),
            init: HyperParams::default(),
            anchor: AnchorMode::Blup,
            knots: None,
            checkpoint_dir: None,
            checkpoint_every: 1000,
        }
    }
}

/// Posterior mode of one system.
pub struct ModeFit {
    pub system: AssembledSystem,
    pub result: ModeResult,
    pub hyper: HyperParams,
    pub eval: GammaEval,
    pub anchors: Anchors,
    /// Mode of the daily-only fit used for the expansion points.
    pub daily: Option<ModeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionDraw {
    pub chain: usize,
    pub iteration: usize,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub options: FitOptions,
    pub names: Vec<String>,
    pub knots: Vec<SpacePoint>,
    pub anchors: Anchors,
    pub daily_mode: Option<ModeResult>,
    pub mode: ModeResult,
    pub mode_hyper: HyperParams,
    pub v_hat: Vec<f64>,
    pub chains: Vec<Chain>,
    /// Pooled effective sample size per coordinate.
    pub ess: Vec<f64>,
    pub draws: Vec<CompositionDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub ess: f64,
}

/// Basis on the sites that carry readings in `dataset`.
pub fn training_basis(dataset: &Dataset, opts: &FitOptions) -> Result<SmoothBasis, FitError> {
    let n_cov = dataset.schema.width();
    Ok(match &opts.knots {
        Some(k) => SmoothBasis::with_knots(opts.model.basis_spec(), k.clone(), n_cov)?,
        None => {
            let locs: Vec<SpacePoint> = dataset
                .active_sites()
                .into_iter()
                .map(|s| dataset.sites[s].point)
                .collect();
            SmoothBasis::from_sites(opts.model.basis_spec(), &locs, n_cov)?
        }
    })
}

fn search(sys: &AssembledSystem, init: &HyperParams, opts: &ModeOptions) -> Result<(ModeResult, HyperParams), FitError> {
    let z0 = sys.space.to_vector(init);
    let res = maximize(|z| sys.log_marginal_gamma(z), &z0, opts)?;
    if !res.converged {
        log::warn!(
            "mode search stopped after {} iterations with gradient norm {:.2e}",
            res.iterations,
            res.grad_norm
        );
    }
    let h = sys.space.from_vector(&res.z)?;
    Ok((res, h))
}

/// Expansion points from the daily readings, or zero in naive mode.
pub fn expansion_points(dataset: &Dataset, basis: &SmoothBasis, opts: &FitOptions) -> Result<(Anchors, Option<ModeResult>), FitError> {
    let has_agg = opts.model.flags.a && dataset.readings.iter().any(|r| r.kind == ReadingKind::Bca);
    if !has_agg {
        return Ok((Anchors::new(), None));
    }
    if opts.anchor == AnchorMode::Naive {
        let a = dataset
            .readings
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == ReadingKind::Bca)
            .map(|(i, r)| (i, vec![0.0; r.span_days as usize]))
            .collect();
        return Ok((a, None));
    }
    let daily = dataset.filter_readings(|r| r.kind.is_daily());
    if daily.readings.is_empty() {
        return Err(FitError::NoDailyData);
    }
    let mut cfg = opts.model.clone();
    cfg.flags.a = false;
    let sys = AssembledSystem::new(&daily, basis.clone(), &cfg, &Anchors::new(), opts.init)?;
    let (res, h) = search(&sys, &opts.init, &opts.mode)?;
    let eval = sys.evaluate(&h)?;
    let v = eval.conditional.mean.clone();
    let a = blup_expansion_point(dataset, &sys, &eval, &v)?;
    Ok((a, Some(res)))
}

/// Mode of the posterior of the full system.
pub fn fit_mode(dataset: &Dataset, opts: &FitOptions) -> Result<ModeFit, FitError> {
    let basis = training_basis(dataset, opts)?;
    let (anchors, daily) = expansion_points(dataset, &basis, opts)?;
    let mut start = opts.init;
    if let Some(d) = &daily {
        // carry the daily-only estimates into the full search
        let mut cfg = opts.model.clone();
        cfg.flags.a = false;
        let daily_ds = dataset.filter_readings(|r| r.kind.is_daily());
        let sys = AssembledSystem::new(&daily_ds, basis.clone(), &cfg, &Anchors::new(), opts.init)?;
        start = sys.space.from_vector(&d.z)?;
    }
    let system = AssembledSystem::new(dataset, basis, &opts.model, &anchors, opts.init)?;
    let (result, hyper) = search(&system, &start, &opts.mode)?;
    let eval = system.evaluate(&hyper)?;
    Ok(ModeFit {
        system,
        result,
        hyper,
        eval,
        anchors,
        daily,
    })
}

/// Proposal covariance from the curvature at the mode, `0.01 I` if unusable.
pub fn mode_proposal(sys: &AssembledSystem, z: &[f64]) -> DMatrix<f64> {
    let d = z.len();
    let fallback = DMatrix::identity(d, d) * 0.01;
    if d == 0 {
        return fallback;
    }
    let hess = numerical_hessian(|x| sys.log_marginal_gamma(x), z, 1e-3);
    if hess.iter().any(|v| !v.is_finite()) {
        return fallback;
    }
    match (-hess).cholesky() {
        Some(c) => {
            let cov = c.inverse() * (2.38 * 2.38 / d as f64);
            if cov.iter().all(|v| v.is_finite()) {
                cov
            } else {
                fallback
            }
        }
        None => fallback,
    }
}

/// Full posterior fit. Returns the result and the assembled system it refers to.
pub fn fit(dataset: &Dataset, opts: &FitOptions) -> Result<(FitResult, AssembledSystem), FitError> {
    let mf = fit_mode(dataset, opts)?;
    let sys = mf.system;
    let z_hat = mf.result.z.clone();
    let proposal = mode_proposal(&sys, &z_hat);
    let chol = proposal.clone().cholesky().map(|c| c.l());
    let target = |z: &[f64]| sys.log_marginal_gamma(z);

    let chains: Vec<Chain> = (0..opts.chains)
        .into_par_iter()
        .map(|c| {
            // start each chain at a small perturbation of the mode
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
            rng.set_stream(1000 + c as u64);
            let mut init = z_hat.clone();
            if let Some(l) = &chol {
                for _ in 0..20 {
                    let e = DVector::from_fn(init.len(), |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
                    let cand: Vec<f64> = z_hat.iter().zip((l * e).iter()).map(|(a, b)| a + b).collect();
                    if target(&cand).is_finite() {
                        init = cand;
                        break;
                    }
                }
            }
            let settings = SamplerSettings {
                n_iter: opts.iters,
                adapt: opts.adapt,
                initial_cov: Some(proposal.clone()),
                checkpoint: opts.checkpoint_dir.as_ref().map(|d| Checkpointing {
                    path: d.join(format!("chain{c}.bin")),
                    every: opts.checkpoint_every,
                }),
            };
            adaptive_rwmh(&target, &init, &settings, opts.seed, c as u64)
        })
        .collect::<Result<_, _>>()?;

    let d = sys.space.dim();
    let pooled_ess = (0..d)
        .map(|k| {
            chains
                .iter()
                .map(|ch| {
                    let xs: Vec<f64> = ch.retained(opts.burn_in, 1).map(|i| ch.states[i][k]).collect();
                    ess(&xs).map(|e| e.value).unwrap_or(0.0)
                })
                .sum()
        })
        .collect();

    let draws = if opts.thin > 0 {
        composition_sample(&sys, &chains, opts.burn_in, opts.thin, opts.seed)
    } else {
        Vec::new()
    };

    let result = FitResult {
        options: opts.clone(),
        names: sys.space.names().iter().map(|s| s.to_string()).collect(),
        knots: sys.basis.knots.clone(),
        anchors: mf.anchors,
        daily_mode: mf.daily,
        mode: mf.result,
        mode_hyper: mf.hyper,
        v_hat: mf.eval.conditional.mean.iter().copied().collect(),
        chains,
        ess: pooled_ess,
        draws,
    };
    Ok((result, sys))
}

/// One exact draw of `v` per retained state; failing states are skipped.
pub fn composition_sample(
    sys: &AssembledSystem,
    chains: &[Chain],
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Vec<CompositionDraw> {
    chains
        .par_iter()
        .enumerate()
        .flat_map_iter(|(c, ch)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
            rng.set_stream(c as u64);
            let mut out = Vec::new();
            for i in ch.retained(burn_in, thin) {
                let h = match sys.space.from_vector(&ch.states[i]) {
                    Ok(h) => h,
                    Err(e) => {
                        log::warn!("chain {c} state {i} skipped: {e}");
                        continue;
                    }
                };
                match sys.conditional_v(&h) {
                    Ok(cond) => out.push(CompositionDraw {
                        chain: c,
                        iteration: i,
                        v: cond.sample(&mut rng).iter().copied().collect(),
                    }),
                    Err(e) => log::warn!("chain {c} state {i} skipped: {e}"),
                }
            }
            out
        })
        .collect()
}

impl FitResult {
    /// Rebuild the system this fit refers to.
    pub fn system(&self, dataset: &Dataset) -> Result<AssembledSystem, FitError> {
        let basis = SmoothBasis::with_knots(self.options.model.basis_spec(), self.knots.clone(), dataset.schema.width())?;
        Ok(AssembledSystem::new(
            dataset,
            basis,
            &self.options.model,
            &self.anchors,
            self.options.init,
        )?)
    }

    /// Retained `(gamma, v)` pairs of the composition draws.
    pub fn posterior_states(&self, sys: &AssembledSystem) -> Result<Vec<(HyperParams, DVector<f64>)>, FitError> {
        self.draws
            .iter()
            .map(|d| {
                let h = sys.space.from_vector(&self.chains[d.chain].states[d.iteration])?;
                Ok((h, DVector::from_vec(d.v.clone())))
            })
            .collect()
    }

    pub fn retained_count(&self) -> usize {
        self.chains
            .iter()
            .map(|c| c.len().saturating_sub(self.options.burn_in))
            .sum()
    }

    /// Mean and 2.5/50/97.5 percentiles of each parameter on its natural scale.
    pub fn summary(&self, sys: &AssembledSystem) -> Vec<SummaryRow> {
        sys.space
            .params
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut xs: Vec<f64> = self
                    .chains
                    .iter()
                    .flat_map(|c| c.retained(self.options.burn_in, 1).map(move |i| c.states[i][k]))
                    .map(|z| if p.is_positive() { z.exp() } else { z })
                    .collect();
                row_from_draws(p, &mut xs, self.ess.get(k).copied().unwrap_or(0.0))
            })
            .collect()
    }

    /// Summaries of the covariate coefficients and population intercepts
    /// from the composition draws; `ess` is left at zero.
    pub fn coefficient_summary(&self, sys: &AssembledSystem, predictor_names: &[String]) -> Vec<SummaryRow> {
        if self.draws.is_empty() {
            return Vec::new();
        }
        let mut cols: Vec<(String, usize)> = sys
            .basis
            .layout
            .covariates
            .clone()
            .map(|j| (predictor_names.get(j).cloned().unwrap_or_else(|| format!("covariate{j}")), j))
            .collect();
        if let Some(i) = sys.layout.indoor {
            cols.push(("indoor_intercept".into(), i));
        }
        if let Some(i) = sys.layout.aggregate {
            cols.push(("aggregate_intercept".into(), i));
        }
        cols.into_iter()
            .map(|(name, j)| {
                let mut xs: Vec<f64> = self.draws.iter().map(|d| d.v[j]).collect();
                named_row(&name, &mut xs, 0.0)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), FitError> {
        let err = |m: String| FitError::Archive {
            path: path.display().to_string(),
            message: m,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FitError> {
        let err = |m: String| FitError::Archive {
            path: path.display().to_string(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn row_from_draws(p: &Param, xs: &mut [f64], ess: f64) -> SummaryRow {
    named_row(p.name(), xs, ess)
}

fn named_row(name: &str, xs: &mut [f64], ess: f64) -> SummaryRow {
    xs.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    SummaryRow {
        name: name.to_string(),
        mean,
        q025: percentile(xs, 0.025),
        q50: percentile(xs, 0.5),
        q975: percentile(xs, 0.975),
        ess,
    }
}
