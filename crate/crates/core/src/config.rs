//! Run configuration shared by the command-line subcommands, and the run
//! manifest written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compare::CompareOptions;
use crate::cv::CvOptions;
use crate::data::CovariateSchema;
use crate::fit::{AnchorMode, FitOptions};
use crate::hyper::{HyperParams, HyperPriors, ModelFlags};
use crate::inference::AdaptConfig;
use crate::scoring::{PartitionOptions, SeparationObjective};
use crate::smooth::BasisSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    File { path: String, message: String },
    #[error("invalid setting `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelFlags,
    pub chains: usize,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub taper_range: f64,
    pub nu: f64,
    pub spatial_knots: usize,
    pub temporal_knots: usize,
    pub delta: f64,
    pub anchor: AnchorMode,
    pub priors: HyperPriors,
    pub init: HyperParams,
    pub adapt: AdaptConfig,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Covariate layout; `None` takes every column of the covariates file.
    pub schema: Option<CovariateSchema>,
    pub cv_groups: usize,
    pub cv_tries: usize,
    pub cv_balance_tolerance: f64,
    pub cv_objective: SeparationObjective,
    pub alpha: f64,
    pub nonlinear_chains: usize,
    pub nonlinear_iters: usize,
    pub nonlinear_burn_in: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        let part = PartitionOptions::default();
        let cmp = CompareOptions::default();
        Self {
            model: ModelFlags::FINAL,
            chains: fit.chains,
            iters: fit.iters,
            burn_in: fit.burn_in,
            thin: fit.thin,
            seed: fit.seed,
            taper_range: fit.model.taper_range,
            nu: fit.model.nu,
            spatial_knots: fit.model.basis.spatial_knots,
            temporal_knots: fit.model.basis.temporal_knots,
            delta: fit.model.delta,
            anchor: fit.anchor,
            priors: fit.model.priors,
            init: fit.init,
            adapt: fit.adapt,
            checkpoint_every: fit.checkpoint_every,
            checkpoint_dir: None,
            schema: None,
            cv_groups: part.groups,
            cv_tries: part.tries,
            cv_balance_tolerance: part.balance_tolerance,
            cv_objective: part.objective,
            alpha: 0.05,
            nonlinear_chains: cmp.nonlinear_chains,
            nonlinear_iters: cmp.nonlinear_iters,
            nonlinear_burn_in: cmp.nonlinear_burn_in,
        }
    }
}

/// Partial settings from the command line or a config file; unset keys keep
/// the value below them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// `"U,GST,A"`, for example `"1,0,1"`.
    pub model: Option<String>,
    pub chains: Option<usize>,
    pub iters: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub taper_range: Option<f64>,
    pub nu: Option<f64>,
    pub spatial_knots: Option<usize>,
    pub temporal_knots: Option<usize>,
    pub delta: Option<f64>,
    pub anchor: Option<AnchorMode>,
    pub priors: Option<HyperPriors>,
    pub init: Option<HyperParams>,
    pub adapt: Option<AdaptConfig>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub schema: Option<CovariateSchema>,
    pub cv_groups: Option<usize>,
    pub cv_tries: Option<usize>,
    pub cv_balance_tolerance: Option<f64>,
    pub cv_objective: Option<SeparationObjective>,
    pub alpha: Option<f64>,
    pub nonlinear_chains: Option<usize>,
    pub nonlinear_iters: Option<usize>,
    pub nonlinear_burn_in: Option<usize>,
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

macro_rules! take {
    ($dst:expr, $src:expr, $($field:ident),*) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = v; } )*
    };
}

impl RunConfig {
    /// Apply `layers` in order; later layers win.
    pub fn resolve(layers: &[&Overrides]) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for o in layers {
            if let Some(m) = &o.model {
                c.model = m.parse().map_err(|_| ConfigError::Invalid {
                    key: "model",
                    message: format!("expected three 0/1 flags `U,GST,A`, got `{m}`"),
                })?;
            }
            take!(
                c,
                o,
                chains,
                iters,
                burn_in,
                thin,
                seed,
                taper_range,
                nu,
                spatial_knots,
                temporal_knots,
                delta,
                anchor,
                priors,
                init,
                adapt,
                checkpoint_every,
                cv_groups,
                cv_tries,
                cv_balance_tolerance,
                cv_objective,
                alpha,
                nonlinear_chains,
                nonlinear_iters,
                nonlinear_burn_in
            );
            if o.checkpoint_dir.is_some() {
                c.checkpoint_dir = o.checkpoint_dir.clone();
            }
            if o.schema.is_some() {
                c.schema = o.schema.clone();
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, message: &str| {
            Err(ConfigError::Invalid {
                key,
                message: message.to_string(),
            })
        };
        if self.burn_in >= self.iters && self.chains > 0 {
            return bad("burn_in", "must be smaller than iters");
        }
        if !(self.taper_range > 0.0) {
            return bad("taper_range", "must be positive");
        }
        if !(self.delta > 0.0) {
            return bad("delta", "must be positive");
        }
        if self.spatial_knots < 3 {
            return bad("spatial_knots", "need at least 3");
        }
        if self.temporal_knots < 3 {
            return bad("temporal_knots", "need at least 3");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if self.cv_groups == 0 {
            return bad("cv_groups", "need at least one group");
        }
        if self.nonlinear_burn_in >= self.nonlinear_iters {
            return bad("nonlinear_burn_in", "must be smaller than nonlinear_iters");
        }
        self.init.validate().map_err(|e| ConfigError::Invalid {
            key: "init",
            message: e.to_string(),
        })
    }

    pub fn fit_options(&self) -> FitOptions {
        let mut f = FitOptions {
            chains: self.chains,
            iters: self.iters,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            adapt: self.adapt,
            init: self.init,
            anchor: self.anchor,
            checkpoint_dir: self.checkpoint_dir.clone(),
            checkpoint_every: self.checkpoint_every,
            ..FitOptions::default()
        };
        f.model.flags = self.model;
        f.model.basis = BasisSpec {
            spatial_knots: self.spatial_knots,
            temporal_knots: self.temporal_knots,
            interaction: self.model.gst,
        };
        f.model.taper_range = self.taper_range;
        f.model.nu = self.nu;
        f.model.delta = self.delta;
        f.model.priors = self.priors;
        f
    }

    pub fn partition_options(&self) -> PartitionOptions {
        PartitionOptions {
            groups: self.cv_groups,
            tries: self.cv_tries,
            seed: self.seed,
            balance_tolerance: self.cv_balance_tolerance,
            objective: self.cv_objective,
        }
    }

    pub fn cv_options(&self) -> CvOptions {
        let mut fit = self.fit_options();
        fit.chains = 0;
        CvOptions { fit, alpha: self.alpha }
    }

    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            linearized: self.fit_options(),
            nonlinear_chains: self.nonlinear_chains,
            nonlinear_iters: self.nonlinear_iters,
            nonlinear_burn_in: self.nonlinear_burn_in,
            seed: self.seed,
            ..CompareOptions::default()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Covariate schema from the header of a covariates file: every column after
/// `site_id,day`, with an intercept.
pub fn schema_from_header(path: &Path) -> Result<CovariateSchema, ConfigError> {
    let err = |message: String| ConfigError::File {
        path: path.display().to_string(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = rd.headers().map_err(|e| err(e.to_string()))?;
    let cols: Vec<String> = header.iter().map(str::to_string).collect();
    if cols.len() < 2 || cols[0] != "site_id" || cols[1] != "day" {
        return Err(err("header must start with `site_id,day`".into()));
    }
    Ok(CovariateSchema {
        intercept: true,
        base: cols[2..].to_vec(),
        interactions: Vec::new(),
    })
}

/// Input file and its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> std::io::Result<InputDigest> {
    let bytes = std::fs::read(path)?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub arguments: Vec<String>,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    /// RNG streams used, one per chain or replication.
    pub streams: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub platform: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            arguments: std::env::args().collect(),
            config_hash: config.hash(),
            config: config.clone(),
            seed: config.seed,
            streams: Vec::new(),
            inputs: Vec::new(),
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}
