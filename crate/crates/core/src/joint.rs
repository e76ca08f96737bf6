//! The conditionally linear-Gaussian joint model
//! `Y - offset = H v + X u + e` and its Gaussian algebra in `v`.
//!
//! Rows are kept in factor order: daily rows sorted by `(day, site)`, then the
//! aggregate rows, which couple many days and form the dense border.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{
    kernel::KernelSpec, CholeskyFactor, CovarianceError, SparseSymmetric, SymbolicCholesky,
};
use crate::data::{Dataset, Day, MonitorReading, ReadingKind, SpacePoint};
use crate::hyper::{HyperParams, HyperPriors, ModelFlags, ParamSpace, SourcesPresent};
use crate::observation::{linearize_aggregate, ObservationError};
use crate::smooth::{BasisSpec, BlockLayout, SmoothBasis, SmoothError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum JointError {
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("coefficient posterior precision is not positive definite")]
    PosteriorPrecision,
    #[error("prior precision is not positive definite")]
    PriorPrecision,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Structural choices that stay fixed for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flags: ModelFlags,
    pub basis: BasisSpec,
    pub taper_range: f64,
    pub nu: f64,
    /// Ridge on unpenalized coefficients.
    pub delta: f64,
    pub priors: HyperPriors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flags: ModelFlags::FINAL,
            basis: BasisSpec::default(),
            taper_range: KernelSpec::DEFAULT_TAPER,
            nu: KernelSpec::DEFAULT_NU,
            delta: 1e-6,
            priors: HyperPriors::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_flags(flags: ModelFlags) -> Self {
        Self {
            flags,
            ..Self::default()
        }
    }

    /// Basis specification with the interaction block switched by the `GST` flag.
    pub fn basis_spec(&self) -> BasisSpec {
        BasisSpec {
            interaction: self.flags.gst,
            ..self.basis
        }
    }

    pub fn kernel(&self, h: &HyperParams) -> KernelSpec {
        KernelSpec {
            nu: self.nu,
            theta_s: h.theta_s,
            theta_t: h.theta_t,
            sigma2_u: h.sigma2_u,
            taper_range: self.taper_range,
        }
    }
}

/// Expansion points for aggregate readings, keyed by reading index in the dataset.
/// Readings without an entry expand about zero.
pub type Anchors = BTreeMap<usize, Vec<f64>>;

/// Column positions of `v = (w; indoor intercept; aggregate intercept; household intercepts)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefLayout {
    pub trend: BlockLayout,
    pub indoor: Option<usize>,
    pub aggregate: Option<usize>,
    pub households: Range<usize>,
    /// Dataset site index of each household column.
    pub household_sites: Vec<usize>,
}

impl CoefLayout {
    pub fn width(&self) -> usize {
        self.households.end
    }

    pub fn trend_width(&self) -> usize {
        self.trend.width()
    }
}

/// One reading as placed in the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    /// Index of the reading in the source dataset.
    pub reading: usize,
    pub kind: ReadingKind,
    pub site: usize,
    pub point: SpacePoint,
    pub start_day: Day,
    /// Latent entries (one per day) in the flat entry arrays.
    pub entries: Range<usize>,
    pub household: Option<usize>,
    pub y: f64,
}

/// Fixed structure of `Sigma_Y`: one item per stored lower-triangle entry.
#[derive(Debug, Clone)]
struct CovStructure {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Per stored entry: index into `site_dists` and range into `terms`.
    entry_site_pair: Vec<u32>,
    entry_terms: Vec<Range<u32>>,
    /// `(latent entry a, latent entry b, lag)`.
    terms: Vec<(u32, u32, u32)>,
    site_dists: Vec<f64>,
    symbolic: SymbolicCholesky,
}

/// The assembled joint model for one dataset and model variant.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub config: ModelConfig,
    pub basis: SmoothBasis,
    pub layout: CoefLayout,
    pub space: ParamSpace,
    pub rows: Vec<SystemRow>,
    /// Trend row `c(s, t)` of every latent entry.
    pub entry_trend: DMatrix<f64>,
    pub entry_day: Vec<Day>,
    pub entry_row: Vec<usize>,
    /// Anchor values per aggregate row, aligned with its entries.
    pub anchors: Vec<Option<Vec<f64>>>,
    cov: CovStructure,
}

/// Gaussian over `v` with precision `P = L L^T`.
#[derive(Debug, Clone)]
pub struct ConditionalV {
    pub mean: DVector<f64>,
    pub precision: Cholesky<f64, Dyn>,
}

impl ConditionalV {
    /// `mean + L^{-T} z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.precision.l_dirty();
        let x = l
            .view_range(.., ..)
            .transpose()
            .solve_upper_triangular(&z)
            .expect("triangular factor has a non-zero diagonal");
        &self.mean + x
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision.inverse()
    }
}

/// Everything computed at one value of the hyperparameters.
#[derive(Debug, Clone)]
pub struct GammaEval {
    pub hyper: HyperParams,
    pub log_likelihood: f64,
    pub sigma: CholeskyFactor,
    pub design: DMatrix<f64>,
    /// Response minus offsets.
    pub residual: DVector<f64>,
    pub entry_weights: Vec<f64>,
    pub conditional: ConditionalV,
}

impl GammaEval {
    /// `Sigma_Y^{-1} (r - H v)` for a coefficient value `v`.
    pub fn kriging_weights(&self, v: &DVector<f64>) -> DVector<f64> {
        let r = &self.residual - &self.design * v;
        self.sigma.solve_vector(&r)
    }
}

impl AssembledSystem {
    /// Assemble the system. Aggregate readings are included only when the
    /// model's `A` flag is set; anchors default to zero.
    pub fn new(
        dataset: &Dataset,
        basis: SmoothBasis,
        config: &ModelConfig,
        anchors: &Anchors,
        fixed: HyperParams,
    ) -> Result<Self, JointError> {
        let keep: Vec<usize> = (0..dataset.readings.len())
            .filter(|&i| config.flags.a || dataset.readings[i].kind != ReadingKind::Bca)
            .collect();
        let n_cov = dataset.schema.width();
        if basis.spec.interaction != config.flags.gst {
            return Err(JointError::Dimension(format!(
                "basis interaction block is {} but the model has GST={}",
                if basis.spec.interaction { "present" } else { "absent" },
                u8::from(config.flags.gst)
            )));
        }
        if basis.layout.covariates.len() != n_cov {
            return Err(JointError::Dimension(format!(
                "basis expects {} covariates, dataset has {n_cov}",
                basis.layout.covariates.len()
            )));
        }

        // factor order
        let mut daily: Vec<usize> = keep
            .iter()
            .copied()
            .filter(|&i| dataset.readings[i].kind.is_daily())
            .collect();
        daily.sort_by_key(|&i| (dataset.readings[i].start_day, dataset.readings[i].site));
        let mut border: Vec<usize> = keep
            .iter()
            .copied()
            .filter(|&i| !dataset.readings[i].kind.is_daily())
            .collect();
        border.sort_by_key(|&i| (dataset.readings[i].start_day, dataset.readings[i].site));
        let order: Vec<usize> = daily.into_iter().chain(border).collect();

        let mut household_sites: Vec<usize> = order
            .iter()
            .map(|&i| &dataset.readings[i])
            .filter(|r| r.kind == ReadingKind::Bci)
            .map(|r| r.site)
            .collect();
        household_sites.sort_unstable();
        household_sites.dedup();
        let has_indoor = !household_sites.is_empty();
        let has_aggregate = order
            .iter()
            .any(|&i| dataset.readings[i].kind == ReadingKind::Bca);

        let trend = basis.layout.clone();
        let pw = trend.width();
        let indoor = has_indoor.then_some(pw);
        let aggregate = has_aggregate.then_some(pw + usize::from(has_indoor));
        let h0 = pw + usize::from(has_indoor) + usize::from(has_aggregate);
        let layout = CoefLayout {
            trend,
            indoor,
            aggregate,
            households: h0..h0 + household_sites.len(),
            household_sites: household_sites.clone(),
        };

        let mut rows = Vec::with_capacity(order.len());
        let mut entry_day = Vec::new();
        let mut entry_row = Vec::new();
        let mut trend_rows: Vec<Vec<f64>> = Vec::new();
        let mut anchor_rows = Vec::with_capacity(order.len());
        for (pos, &i) in order.iter().enumerate() {
            let r: &MonitorReading = &dataset.readings[i];
            let point = dataset.sites[r.site].point;
            let start = entry_day.len();
            for day in r.days() {
                let x = dataset.covariate_row(r.site, day)?;
                trend_rows.push(basis.design_row(&point, day, x)?);
                entry_day.push(day);
                entry_row.push(pos);
            }
            let household = (r.kind == ReadingKind::Bci)
                .then(|| household_sites.binary_search(&r.site).unwrap());
            anchor_rows.push(if r.kind == ReadingKind::Bca {
                let a = anchors
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; r.span_days as usize]);
                if a.len() != r.span_days as usize {
                    return Err(JointError::Dimension(format!(
                        "anchor for reading {i} has {} days, span is {}",
                        a.len(),
                        r.span_days
                    )));
                }
                Some(a)
            } else {
                None
            });
            rows.push(SystemRow {
                reading: i,
                kind: r.kind,
                site: r.site,
                point,
                start_day: r.start_day,
                entries: start..entry_day.len(),
                household,
                y: r.y,
            });
        }
        let mut entry_trend = DMatrix::zeros(trend_rows.len(), pw);
        for (e, row) in trend_rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                entry_trend[(e, j)] = *v;
            }
        }

        let space = ParamSpace::new(
            config.flags,
            SourcesPresent {
                indoor_daily: has_indoor,
                aggregate: has_aggregate,
            },
            fixed,
            config.priors,
        );
        let cov = build_structure(&rows, &entry_day, config);
        Ok(Self {
            config: config.clone(),
            basis,
            layout,
            space,
            rows,
            entry_trend,
            entry_day,
            entry_row,
            anchors: anchor_rows,
            cov,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_coef(&self) -> usize {
        self.layout.width()
    }

    /// First row of the aggregate border.
    pub fn border_start(&self) -> usize {
        self.rows
            .iter()
            .position(|r| !r.kind.is_daily())
            .unwrap_or(self.rows.len())
    }

    /// Latent weight of each entry and the offset of each row at `h`.
    pub fn weights_and_offsets(&self, h: &HyperParams) -> Result<(Vec<f64>, DVector<f64>), JointError> {
        let mut w = vec![0.0; self.entry_day.len()];
        let mut offset = DVector::zeros(self.rows.len());
        for (a, row) in self.rows.iter().enumerate() {
            match row.kind {
                ReadingKind::Bco => w[row.entries.start] = 1.0,
                ReadingKind::Bci => w[row.entries.start] = h.alpha_1i,
                ReadingKind::Bca => {
                    let anchor = self.anchors[a].as_ref().expect("aggregate rows carry anchors");
                    let lin = linearize_aggregate(anchor, h.alpha_1a)?;
                    w[row.entries.clone()].copy_from_slice(&lin.weights);
                    offset[a] = lin.offset;
                }
            }
        }
        Ok((w, offset))
    }

    fn error_variance(&self, kind: ReadingKind, h: &HyperParams) -> f64 {
        match kind {
            ReadingKind::Bco => h.sigma2_o,
            ReadingKind::Bci => h.sigma2_i,
            ReadingKind::Bca => h.sigma2_a + h.sigma2_alpha0,
        }
    }

    /// Marginal covariance of the residual vector at `h`.
    pub fn sigma_y(&self, h: &HyperParams) -> Result<SparseSymmetric, JointError> {
        let (w, _) = self.weights_and_offsets(h)?;
        self.sigma_y_with(h, &w)
    }

    fn sigma_y_with(&self, h: &HyperParams, weights: &[f64]) -> Result<SparseSymmetric, JointError> {
        let s = &self.cov;
        let mut values = vec![0.0; s.col_idx.len()];
        if self.config.flags.u {
            let kernel = self.config.kernel(h);
            kernel.validate()?;
            let max_lag = s.terms.iter().map(|t| t.2).max().unwrap_or(0) as usize;
            let taper: Vec<f64> = (0..=max_lag).map(|l| kernel.temporal(l as f64)).collect();
            let spatial: Vec<f64> = s.site_dists.iter().map(|&d| kernel.spatial(d)).collect();
            for (k, v) in values.iter_mut().enumerate() {
                let terms = &s.terms[s.entry_terms[k].start as usize..s.entry_terms[k].end as usize];
                let mut acc = 0.0;
                for &(ea, eb, lag) in terms {
                    acc += weights[ea as usize] * weights[eb as usize] * taper[lag as usize];
                }
                *v = h.sigma2_u * spatial[s.entry_site_pair[k] as usize] * acc;
            }
        }
        for (a, row) in self.rows.iter().enumerate() {
            values[s.row_ptr[a + 1] - 1] += self.error_variance(row.kind, h);
        }
        Ok(SparseSymmetric::from_pattern(s.row_ptr.clone(), s.col_idx.clone(), values))
    }

    /// Coefficient design `H` (rows in factor order) for latent weights `weights`.
    pub fn design_with(&self, weights: &[f64]) -> DMatrix<f64> {
        let n = self.rows.len();
        let p = self.n_coef();
        let pw = self.layout.trend_width();
        let mut hm = DMatrix::zeros(n, p);
        for (a, row) in self.rows.iter().enumerate() {
            for e in row.entries.clone() {
                let wgt = weights[e];
                for j in 0..pw {
                    hm[(a, j)] += wgt * self.entry_trend[(e, j)];
                }
            }
            match row.kind {
                ReadingKind::Bci => {
                    hm[(a, self.layout.indoor.unwrap())] = 1.0;
                    hm[(a, self.layout.households.start + row.household.unwrap())] = 1.0;
                }
                ReadingKind::Bca => hm[(a, self.layout.aggregate.unwrap())] = 1.0,
                ReadingKind::Bco => {}
            }
        }
        hm
    }

    pub fn design(&self, h: &HyperParams) -> Result<(DMatrix<f64>, DVector<f64>), JointError> {
        let (w, offset) = self.weights_and_offsets(h)?;
        Ok((self.design_with(&w), offset))
    }

    /// Prior precision of `v`.
    pub fn prior_precision(&self, h: &HyperParams) -> Result<DMatrix<f64>, JointError> {
        let p = self.n_coef();
        let pw = self.layout.trend_width();
        let mut q = DMatrix::zeros(p, p);
        let qw = self.basis.prior_precision_dense(h, self.config.delta)?;
        q.view_mut((0, 0), (pw, pw)).copy_from(&qw);
        if let Some(i) = self.layout.indoor {
            q[(i, i)] = self.config.delta;
        }
        if let Some(i) = self.layout.aggregate {
            q[(i, i)] = self.config.delta;
        }
        if !self.layout.households.is_empty() {
            if !(h.sigma2_alpha0 > 0.0) {
                return Err(JointError::PriorPrecision);
            }
            for i in self.layout.households.clone() {
                q[(i, i)] = 1.0 / h.sigma2_alpha0;
            }
        }
        Ok(q)
    }

    pub fn response(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.y))
    }

    /// Factor, marginal log-likelihood and the conditional of `v` at `h`.
    pub fn evaluate(&self, h: &HyperParams) -> Result<GammaEval, JointError> {
        let (weights, offset) = self.weights_and_offsets(h)?;
        let sigma_y = self.sigma_y_with(h, &weights)?;
        let jitter = 1e-10 * if self.config.flags.u { h.sigma2_u } else { 1.0 };
        let sigma = CholeskyFactor::factor_with_retry(&sigma_y, &self.cov.symbolic, jitter)?;
        let design = self.design_with(&weights);
        let residual = self.response() - offset;
        let q = self.prior_precision(h)?;
        let n = self.rows.len();

        let h_hat = sigma.forward_solve_matrix(&design);
        let mut r_hat = residual.clone();
        sigma.forward_solve_in_place(r_hat.as_mut_slice());
        let p_mat = &q + h_hat.tr_mul(&h_hat);
        let b = h_hat.tr_mul(&r_hat);
        let q_chol = Cholesky::new(q).ok_or(JointError::PriorPrecision)?;
        let p_chol = Cholesky::new(p_mat).ok_or(JointError::PosteriorPrecision)?;
        let mean = p_chol.solve(&b);
        let log_det = |c: &Cholesky<f64, Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = r_hat.norm_squared() - b.dot(&mean);
        let log_likelihood = -0.5
            * (n as f64 * LN_2PI + sigma.log_det() + log_det(&p_chol) - log_det(&q_chol) + quad);
        Ok(GammaEval {
            hyper: *h,
            log_likelihood,
            sigma,
            design,
            residual,
            entry_weights: weights,
            conditional: ConditionalV {
                mean,
                precision: p_chol,
            },
        })
    }

    /// Marginal log-likelihood, `-inf` when any factorization fails.
    pub fn log_marginal(&self, h: &HyperParams) -> f64 {
        match self.evaluate(h) {
            Ok(e) if e.log_likelihood.is_finite() => e.log_likelihood,
            Ok(_) => f64::NEG_INFINITY,
            Err(e) => {
                log::debug!("log marginal rejected: {e}");
                f64::NEG_INFINITY
            }
        }
    }

    /// Log posterior of the sampler coordinates `z` up to a constant.
    pub fn log_marginal_gamma(&self, z: &[f64]) -> f64 {
        let prior = self.space.log_prior(z);
        if !prior.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.space.from_vector(z) {
            Ok(h) => self.log_marginal(&h) + prior,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    pub fn conditional_v(&self, h: &HyperParams) -> Result<ConditionalV, JointError> {
        Ok(self.evaluate(h)?.conditional)
    }

    /// Fraction of structurally nonzero entries of `Sigma_Y`.
    pub fn fill_fraction(&self) -> f64 {
        let n = self.rows.len();
        if n == 0 {
            return 0.0;
        }
        (2 * self.cov.col_idx.len() - n) as f64 / (n as f64 * n as f64)
    }

    pub fn symbolic(&self) -> &SymbolicCholesky {
        &self.cov.symbolic
    }

    /// Latent point of every entry.
    pub fn entry_point(&self, e: usize) -> (SpacePoint, Day) {
        (self.rows[self.entry_row[e]].point, self.entry_day[e])
    }

    /// Distinct trend coefficients `w` part of `v`.
    pub fn trend_part<'a>(&self, v: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        v.rows(0, self.layout.trend_width())
    }
}

fn build_structure(rows: &[SystemRow], entry_day: &[Day], config: &ModelConfig) -> CovStructure {
    let n = rows.len();
    let reach = if config.flags.u {
        (config.taper_range.ceil() as i64 - 1).max(0)
    } else {
        -1
    };
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut entry_site_pair = Vec::new();
    let mut entry_terms = Vec::new();
    let mut terms = Vec::new();
    let mut site_pairs: HashMap<(usize, usize), u32> = HashMap::new();
    let mut site_dists = Vec::new();
    row_ptr.push(0);

    // rows touching each day, in factor order
    let mut by_day: BTreeMap<Day, Vec<usize>> = BTreeMap::new();
    if reach >= 0 {
        for (a, row) in rows.iter().enumerate() {
            for e in row.entries.clone() {
                by_day.entry(entry_day[e]).or_default().push(a);
            }
        }
    }
    let mut seen = vec![usize::MAX; n];
    let mut cand = Vec::new();
    for (a, row) in rows.iter().enumerate() {
        cand.clear();
        if reach >= 0 {
            let first = entry_day[row.entries.start] as i64;
            let last = entry_day[row.entries.end - 1] as i64;
            let lo = (first - reach).max(0) as Day;
            let hi = (last + reach) as Day;
            for (_, list) in by_day.range(lo..=hi) {
                for &b in list {
                    if b < a && seen[b] != a {
                        seen[b] = a;
                        cand.push(b);
                    }
                }
            }
            cand.sort_unstable();
        }
        cand.push(a);
        for &b in &cand {
            let start = terms.len() as u32;
            for ea in rows[a].entries.clone() {
                for eb in rows[b].entries.clone() {
                    let lag = (entry_day[ea] as i64 - entry_day[eb] as i64).unsigned_abs();
                    if (lag as f64) < config.taper_range && reach >= 0 {
                        terms.push((ea as u32, eb as u32, lag as u32));
                    }
                }
            }
            if (terms.len() as u32) == start && b != a {
                continue;
            }
            let key = (rows[a].site.min(rows[b].site), rows[a].site.max(rows[b].site));
            let sp = *site_pairs.entry(key).or_insert_with(|| {
                site_dists.push(rows[a].point.distance(&rows[b].point));
                (site_dists.len() - 1) as u32
            });
            col_idx.push(b);
            entry_site_pair.push(sp);
            entry_terms.push(start..terms.len() as u32);
        }
        row_ptr.push(col_idx.len());
    }
    let pattern = SparseSymmetric::from_pattern(row_ptr.clone(), col_idx.clone(), vec![0.0; col_idx.len()]);
    let symbolic = SymbolicCholesky::analyze(&pattern);
    CovStructure {
        row_ptr,
        col_idx,
        entry_site_pair,
        entry_terms,
        terms,
        site_dists,
        symbolic,
    }
}
