//! Synthetic monitoring networks drawn from the exact nonlinear model.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{assemble_cov_u, temporal_lexicographic_order, CholeskyFactor, KernelSpec, LatentPoint};
use crate::data::{
    CovariateSchema, CovariateTable, Dataset, Day, MonitorReading, ReadingKind, Site, SiteId, SpacePoint,
    DAYS_PER_YEAR,
};
use crate::hyper::HyperParams;
use crate::observation::g_aggregate;
use crate::smooth::{BasisSpec, SmoothBasis};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("latent covariance is not positive definite")]
    Covariance,
    #[error(transparent)]
    Smooth(#[from] crate::smooth::SmoothError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("scenario file {path}: {message}")]
    Config { path: String, message: String },
}

/// How the long-range trend coefficients are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trend {
    /// Penalized coefficients drawn from their smoothing prior; the linear
    /// spatial terms take the given values.
    Prior { gradient: (f64, f64) },
    /// Closed-form seasonal cycle, planar gradient and Gaussian bumps.
    Recipe {
        seasonal_amplitude: f64,
        peak_day: f64,
        gradient: (f64, f64),
        #[serde(default)]
        bumps: Vec<Bump>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x_km: f64,
    pub y_km: f64,
    pub radius_km: f64,
    pub height: f64,
}

/// Extra base covariates generated by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    /// Coefficient in the true trend.
    pub coef: f64,
    /// Sites draw one value each (`true`) or every day draws one shared value.
    pub per_site: bool,
}

/// Everything that defines one synthetic network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub study_days: u32,
    pub extent_km: f64,
    pub outdoor_sites: usize,
    pub indoor_sites: usize,
    pub aggregate_sites: usize,
    /// Operation window length range (days) of daily monitors.
    pub outdoor_window: (u32, u32),
    pub indoor_window: (u32, u32),
    /// Number of consecutive aggregate readings per aggregate site.
    pub aggregate_readings: (u32, u32),
    /// Aggregate span range, drawn uniformly.
    pub span_range: (u32, u32),
    /// Fraction of indoor households placed next to an outdoor monitor.
    pub indoor_colocated: f64,
    pub truth: HyperParams,
    pub intercept: f64,
    pub indoor_intercept: f64,
    pub aggregate_intercept: f64,
    pub trend: Trend,
    pub covariates: Vec<SimCovariate>,
    /// Basis used to generate the trend.
    pub basis: BasisSpec,
    pub taper_range: f64,
    pub nu: f64,
    /// Include the short-range process.
    pub include_u: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            study_days: 120,
            extent_km: 20.0,
            outdoor_sites: 10,
            indoor_sites: 4,
            aggregate_sites: 6,
            outdoor_window: (20, 40),
            indoor_window: (5, 10),
            aggregate_readings: (1, 3),
            span_range: (3, 14),
            indoor_colocated: 0.5,
            truth: HyperParams::default(),
            intercept: 0.0,
            indoor_intercept: -0.3,
            aggregate_intercept: -0.3,
            trend: Trend::Recipe {
                seasonal_amplitude: 0.3,
                peak_day: 20.0,
                gradient: (0.02, -0.01),
                bumps: Vec::new(),
            },
            covariates: Vec::new(),
            basis: BasisSpec {
                spatial_knots: 8,
                temporal_knots: 7,
                interaction: false,
            },
            taper_range: KernelSpec::DEFAULT_TAPER,
            nu: KernelSpec::DEFAULT_NU,
            include_u: true,
        }
    }
}

impl ScenarioConfig {
    /// Names accepted by [`ScenarioConfig::preset`].
    pub const PRESETS: [&'static str; 3] = ["small", "linearization", "cv-benchmark"];

    /// Built-in scenarios: a quick smoke network, the linearization
    /// comparison network and the cross-validation benchmark.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        Some(match name {
            "small" => Self {
                study_days: 60,
                extent_km: 15.0,
                outdoor_sites: 6,
                indoor_sites: 3,
                aggregate_sites: 5,
                outdoor_window: (15, 25),
                indoor_window: (5, 8),
                aggregate_readings: (1, 2),
                basis: BasisSpec {
                    spatial_knots: 5,
                    temporal_knots: 6,
                    interaction: false,
                },
                ..base
            },
            "linearization" => Self {
                seed: 7,
                study_days: 365,
                extent_km: 20.0,
                outdoor_sites: 10,
                indoor_sites: 6,
                aggregate_sites: 24,
                outdoor_window: (25, 35),
                indoor_window: (8, 12),
                aggregate_readings: (1, 2),
                ..base
            },
            "cv-benchmark" => Self {
                seed: 2014,
                study_days: 120,
                extent_km: 20.0,
                outdoor_sites: 24,
                indoor_sites: 6,
                aggregate_sites: 80,
                outdoor_window: (20, 40),
                indoor_window: (5, 10),
                aggregate_readings: (1, 2),
                trend: Trend::Recipe {
                    seasonal_amplitude: 0.3,
                    peak_day: 20.0,
                    gradient: (0.03, -0.02),
                    bumps: quadrant_bumps(20.0, 0.2),
                },
                ..base
            },
            _ => return None,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimulateError> {
        let err = |message: String| SimulateError::Config {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn schema(&self) -> CovariateSchema {
        CovariateSchema {
            intercept: true,
            base: self.covariates.iter().map(|c| c.name.clone()).collect(),
            interactions: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::Infeasible(m.to_string()));
        if self.study_days == 0 || self.extent_km <= 0.0 {
            return bad("study length and extent must be positive");
        }
        if self.outdoor_sites + self.indoor_sites + self.aggregate_sites == 0 {
            return bad("no sites");
        }
        for (lo, hi) in [self.outdoor_window, self.indoor_window] {
            if lo == 0 || lo > hi || hi > self.study_days {
                return bad("operation windows must fit in the study period");
            }
        }
        let (slo, shi) = self.span_range;
        if slo == 0 || slo > shi {
            return bad("aggregate span range is empty");
        }
        let (rlo, rhi) = self.aggregate_readings;
        if self.aggregate_sites > 0 && (rlo == 0 || rlo > rhi || rhi * shi > self.study_days) {
            return bad("aggregate windows fall outside the study period");
        }
        self.truth
            .validate()
            .map_err(|e| SimulateError::Infeasible(e.to_string()))
    }
}

/// One bump per quadrant of a square study area, alternating in sign.
pub fn quadrant_bumps(extent_km: f64, height: f64) -> Vec<Bump> {
    let (lo, hi) = (0.25 * extent_km, 0.75 * extent_km);
    [(lo, lo, 1.0), (hi, lo, -1.0), (lo, hi, -1.0), (hi, hi, 1.0)]
        .into_iter()
        .map(|(x_km, y_km, sign)| Bump {
            x_km,
            y_km,
            radius_km: 0.15 * extent_km,
            height: sign * height,
        })
        .collect()
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub hyper: HyperParams,
    /// Latent process at every `(site, day)` touched by a reading.
    pub eta: BTreeMap<(usize, Day), f64>,
    pub u: BTreeMap<(usize, Day), f64>,
    /// Trend coefficients on `basis` (only for prior-drawn trends).
    pub trend_coefs: Option<Vec<f64>>,
    pub knots: Vec<SpacePoint>,
    pub indoor_intercept: f64,
    pub aggregate_intercept: f64,
    /// Household intercepts of indoor and aggregate sites.
    pub household: BTreeMap<usize, f64>,
    /// Noise-free value of each reading.
    pub noiseless: Vec<f64>,
}

impl Truth {
    pub fn eta_at(&self, site: usize, day: Day) -> Option<f64> {
        self.eta.get(&(site, day)).copied()
    }
}

/// Scalar part of the truth in a JSON-friendly shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub hyper: HyperParams,
    pub indoor_intercept: f64,
    pub aggregate_intercept: f64,
    /// Household intercepts keyed by site id.
    pub household: BTreeMap<String, f64>,
    pub trend_coefs: Option<Vec<f64>>,
    pub knots: Vec<SpacePoint>,
}

/// Write `truth.json`, `truth_eta.csv` (`site_id,day,eta,u`) and
/// `truth_readings.csv` (`row,site_id,kind,start_day,noiseless`) into `dir`.
pub fn write_truth(dir: &Path, dataset: &Dataset, truth: &Truth) -> Result<(), SimulateError> {
    let err = |p: &Path, e: String| SimulateError::Config {
        path: p.display().to_string(),
        message: e,
    };
    let summary = TruthSummary {
        hyper: truth.hyper,
        indoor_intercept: truth.indoor_intercept,
        aggregate_intercept: truth.aggregate_intercept,
        household: truth
            .household
            .iter()
            .map(|(&s, &v)| (dataset.sites[s].id.0.clone(), v))
            .collect(),
        trend_coefs: truth.trend_coefs.clone(),
        knots: truth.knots.clone(),
    };
    let p = dir.join("truth.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| err(&p, e.to_string()))?;
    std::fs::write(&p, text).map_err(|e| err(&p, e.to_string()))?;

    let p = dir.join("truth_eta.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| err(&p, e.to_string()))?;
    let csv_err = |e: csv::Error| err(&dir.join("truth_eta.csv"), e.to_string());
    w.write_record(["site_id", "day", "eta", "u"]).map_err(csv_err)?;
    for (&(s, d), &e) in &truth.eta {
        let u = truth.u.get(&(s, d)).copied().unwrap_or(0.0);
        w.write_record([dataset.sites[s].id.0.clone(), d.to_string(), e.to_string(), u.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| err(&p, e.to_string()))?;

    let p = dir.join("truth_readings.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| err(&p, e.to_string()))?;
    let csv_err = |e: csv::Error| err(&dir.join("truth_readings.csv"), e.to_string());
    w.write_record(["row", "site_id", "kind", "start_day", "noiseless"]).map_err(csv_err)?;
    for (i, (r, v)) in dataset.readings.iter().zip(&truth.noiseless).enumerate() {
        w.write_record([
            i.to_string(),
            dataset.sites[r.site].id.0.clone(),
            r.kind.as_str().to_string(),
            r.start_day.to_string(),
            v.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| err(&p, e.to_string()))?;
    Ok(())
}

/// Trend function fixed by a scenario.
pub struct TrueTrend {
    basis: Option<SmoothBasis>,
    coefs: Option<Vec<f64>>,
    recipe: Trend,
    intercept: f64,
    covariate_coefs: Vec<f64>,
}

impl TrueTrend {
    /// `c(s,t)^T w` for expanded covariate row `x` (leading intercept included).
    pub fn value(&self, s: &SpacePoint, t: Day, x: &[f64]) -> f64 {
        let cov: f64 = self.intercept * x[0]
            + x[1..].iter().zip(&self.covariate_coefs).map(|(a, b)| a * b).sum::<f64>();
        match (&self.recipe, &self.coefs) {
            (Trend::Prior { .. }, Some(w)) => {
                let basis = self.basis.as_ref().expect("prior trends carry a basis");
                let row = basis
                    .design_row(s, t, &vec![0.0; basis.layout.covariates.len()])
                    .expect("covariate width matches");
                cov + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            }
            (
                Trend::Recipe {
                    seasonal_amplitude,
                    peak_day,
                    gradient,
                    bumps,
                },
                _,
            ) => {
                let d = (t % DAYS_PER_YEAR) as f64;
                let season = seasonal_amplitude
                    * (2.0 * std::f64::consts::PI * (d - peak_day) / DAYS_PER_YEAR as f64).cos();
                let mut v = cov + season + gradient.0 * s.x_km + gradient.1 * s.y_km;
                for b in bumps {
                    let r2 = (s.x_km - b.x_km).powi(2) + (s.y_km - b.y_km).powi(2);
                    v += b.height * (-0.5 * r2 / (b.radius_km * b.radius_km)).exp();
                }
                v
            }
            _ => cov,
        }
    }
}

/// Draw a dataset and its truth.
pub fn simulate(config: &ScenarioConfig) -> Result<(Dataset, Truth), SimulateError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ext = config.extent_km;
    let point = |rng: &mut ChaCha8Rng| SpacePoint {
        x_km: rng.gen_range(0.0..ext),
        y_km: rng.gen_range(0.0..ext),
    };

    let mut sites = Vec::new();
    let mut kinds = Vec::new();
    for i in 0..config.outdoor_sites {
        sites.push(Site {
            id: SiteId(format!("O{i:03}")),
            point: point(&mut rng),
        });
        kinds.push(ReadingKind::Bco);
    }
    for i in 0..config.indoor_sites {
        let p = if config.outdoor_sites > 0 && rng.gen::<f64>() < config.indoor_colocated {
            let host = sites[rng.gen_range(0..config.outdoor_sites)].point;
            SpacePoint {
                x_km: host.x_km + rng.gen_range(-0.2..0.2),
                y_km: host.y_km + rng.gen_range(-0.2..0.2),
            }
        } else {
            point(&mut rng)
        };
        sites.push(Site {
            id: SiteId(format!("I{i:03}")),
            point: p,
        });
        kinds.push(ReadingKind::Bci);
    }
    for i in 0..config.aggregate_sites {
        sites.push(Site {
            id: SiteId(format!("A{i:03}")),
            point: point(&mut rng),
        });
        kinds.push(ReadingKind::Bca);
    }

    // operation windows and readings
    let mut readings = Vec::new();
    for (s, kind) in kinds.iter().enumerate() {
        match kind {
            ReadingKind::Bco | ReadingKind::Bci => {
                let (lo, hi) = if *kind == ReadingKind::Bco {
                    config.outdoor_window
                } else {
                    config.indoor_window
                };
                let len = rng.gen_range(lo..=hi);
                let start = rng.gen_range(0..=config.study_days - len);
                for day in start..start + len {
                    readings.push(MonitorReading {
                        site: s,
                        kind: *kind,
                        start_day: day,
                        span_days: 1,
                        y: 0.0,
                    });
                }
            }
            ReadingKind::Bca => {
                let count = rng.gen_range(config.aggregate_readings.0..=config.aggregate_readings.1);
                let spans: Vec<u32> = (0..count)
                    .map(|_| rng.gen_range(config.span_range.0..=config.span_range.1))
                    .collect();
                let total: u32 = spans.iter().sum();
                if total > config.study_days {
                    return Err(SimulateError::Infeasible(
                        "aggregate windows fall outside the study period".into(),
                    ));
                }
                let mut day = rng.gen_range(0..=config.study_days - total);
                for span in spans {
                    readings.push(MonitorReading {
                        site: s,
                        kind: ReadingKind::Bca,
                        start_day: day,
                        span_days: span,
                        y: 0.0,
                    });
                    day += span;
                }
            }
        }
    }

    // covariates
    let schema = config.schema();
    let mut site_values: Vec<Vec<f64>> = vec![Vec::new(); sites.len()];
    for sv in site_values.iter_mut() {
        *sv = (0..config.covariates.len()).map(|_| rng.sample(StandardNormal)).collect();
    }
    let day_values: Vec<Vec<f64>> = (0..config.study_days)
        .map(|_| {
            (0..config.covariates.len())
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let mut latent: Vec<(usize, Day)> = readings
        .iter()
        .flat_map(|r| r.days().map(move |d| (r.site, d)))
        .collect();
    latent.sort_unstable();
    latent.dedup();
    let mut covariates = CovariateTable::default();
    for &(s, d) in &latent {
        let base: Vec<f64> = config
            .covariates
            .iter()
            .enumerate()
            .map(|(j, c)| if c.per_site { site_values[s][j] } else { day_values[d as usize][j] })
            .collect();
        covariates.insert(&schema, s, d, base)?;
    }

    // trend
    let locations: Vec<SpacePoint> = sites.iter().map(|s| s.point).collect();
    let trend = true_trend(config, &locations, &mut rng)?;

    // short-range process
    let h = &config.truth;
    let mut u = BTreeMap::new();
    if config.include_u && h.sigma2_u > 0.0 && !latent.is_empty() {
        let kernel = KernelSpec {
            nu: config.nu,
            theta_s: h.theta_s,
            theta_t: h.theta_t,
            sigma2_u: h.sigma2_u,
            taper_range: config.taper_range,
        };
        let draws = draw_gp(&latent, &locations, &kernel, &mut rng)?;
        for (k, v) in latent.iter().zip(draws.iter()) {
            u.insert(*k, *v);
        }
    }
    let mut eta = BTreeMap::new();
    for &(s, d) in &latent {
        let x = covariates.row(s, d).expect("covariates inserted above");
        let value = trend.value(&locations[s], d, x) + u.get(&(s, d)).copied().unwrap_or(0.0);
        eta.insert((s, d), value);
    }

    let mut household = BTreeMap::new();
    for (s, kind) in kinds.iter().enumerate() {
        if *kind != ReadingKind::Bco {
            household.insert(s, h.sigma2_alpha0.sqrt() * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let mut noiseless = Vec::with_capacity(readings.len());
    for r in readings.iter_mut() {
        let (mean, var) = match r.kind {
            ReadingKind::Bco => (eta[&(r.site, r.start_day)], h.sigma2_o),
            ReadingKind::Bci => (
                config.indoor_intercept + household[&r.site] + h.alpha_1i * eta[&(r.site, r.start_day)],
                h.sigma2_i,
            ),
            ReadingKind::Bca => {
                let window: Vec<f64> = r.days().map(|d| eta[&(r.site, d)]).collect();
                let g = g_aggregate(&window, h.alpha_1a).expect("spans are positive");
                (config.aggregate_intercept + household[&r.site] + g, h.sigma2_a)
            }
        };
        noiseless.push(mean);
        r.y = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }

    let dataset = Dataset::new(schema, sites, readings, covariates)?;
    let truth = Truth {
        hyper: *h,
        eta,
        u,
        trend_coefs: trend.coefs.clone(),
        knots: trend.basis.as_ref().map(|b| b.knots.clone()).unwrap_or_default(),
        indoor_intercept: config.indoor_intercept,
        aggregate_intercept: config.aggregate_intercept,
        household,
        noiseless,
    };
    Ok((dataset, truth))
}

/// The trend a scenario uses, with coefficients drawn if prior-based.
pub fn true_trend(
    config: &ScenarioConfig,
    locations: &[SpacePoint],
    rng: &mut ChaCha8Rng,
) -> Result<TrueTrend, SimulateError> {
    let n_cov = config.covariates.len() + 1;
    let (basis, coefs) = match &config.trend {
        Trend::Prior { gradient } => {
            let basis = SmoothBasis::from_sites(config.basis, locations, n_cov)?;
            let w = draw_prior_trend(&basis, &config.truth, *gradient, rng)?;
            (Some(basis), Some(w))
        }
        Trend::Recipe { .. } => (None, None),
    };
    Ok(TrueTrend {
        basis,
        coefs,
        recipe: config.trend.clone(),
        intercept: config.intercept,
        covariate_coefs: config.covariates.iter().map(|c| c.coef).collect(),
    })
}

/// Penalized smooth coefficients drawn from `N(0, (M / tau^2)^{-1})` block by
/// block; covariate entries are zero (the covariate part is added separately).
fn draw_prior_trend(
    basis: &SmoothBasis,
    h: &HyperParams,
    gradient: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SimulateError> {
    let mut w = vec![0.0; basis.width()];
    let s = basis.layout.spatial.clone();
    w[s.start] = gradient.0;
    w[s.start + 1] = gradient.1;
    let ms = basis.penalties.spatial.view((2, 2), (s.len() - 2, s.len() - 2)).clone_owned();
    let mut fill = |block: DMatrix<f64>, start: usize, rng: &mut ChaCha8Rng| -> Result<(), SimulateError> {
        if block.nrows() == 0 {
            return Ok(());
        }
        let chol = block.cholesky().ok_or(SimulateError::Covariance)?;
        let z = DVector::from_fn(chol.l().nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or(SimulateError::Covariance)?;
        for (i, v) in x.iter().enumerate() {
            w[start + i] = *v;
        }
        Ok(())
    };
    fill(ms / h.tau2_s, s.start + 2, rng)?;
    fill(&basis.penalties.temporal / h.tau2_t, basis.layout.temporal.start, rng)?;
    if let (Some(r), Some(a), Some(b)) = (
        &basis.layout.tensor,
        &basis.penalties.tensor_spatial,
        &basis.penalties.tensor_temporal,
    ) {
        let mut block = a / h.tau2_st_s + b / h.tau2_st_t;
        // the linear spatial rows of the spatial margin are unpenalized in `a`
        for i in 0..block.nrows() {
            block[(i, i)] += 1e-8;
        }
        fill(block, r.start, rng)?;
    }
    Ok(w)
}

/// Zero-mean Gaussian draw over `(site, day)` points through the sparse
/// factor of the tapered covariance in temporal order.
pub fn draw_gp(
    points: &[(usize, Day)],
    locations: &[SpacePoint],
    kernel: &KernelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SimulateError> {
    let latent: Vec<LatentPoint> = points
        .iter()
        .map(|&(site, day)| LatentPoint {
            site,
            point: locations[site],
            day,
        })
        .collect();
    let order = temporal_lexicographic_order(&latent);
    let sorted: Vec<LatentPoint> = order.iter().map(|&i| latent[i]).collect();
    let cov = assemble_cov_u(&sorted, kernel).map_err(|_| SimulateError::Covariance)?;
    let chol = CholeskyFactor::factor(&cov).map_err(|_| SimulateError::Covariance)?;
    let z: Vec<f64> = (0..points.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = chol.lower_mul(&z);
    let mut out = vec![0.0; points.len()];
    for (p, &i) in order.iter().enumerate() {
        out[i] = x[p];
    }
    Ok(out)
}

/// Sites of `kind` shuffled with a seed; helper for building held-out sets.
pub fn sites_of_kind(dataset: &Dataset, kind: ReadingKind, seed: u64) -> Vec<usize> {
    let mut out: Vec<usize> = dataset
        .active_sites()
        .into_iter()
        .filter(|&s| dataset.readings.iter().any(|r| r.site == s && r.kind == kind))
        .collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
