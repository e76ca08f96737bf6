use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stfusion::data::{CovariateSchema, CovariateTable, Dataset, MonitorReading, ReadingKind, Site, SiteId, SpacePoint};
use stfusion::hyper::{HyperParams, ModelFlags};
use stfusion::joint::{Anchors, AssembledSystem, ModelConfig};
use stfusion::simulate::{simulate, ScenarioConfig};
use stfusion::smooth::{BasisSpec, SmoothBasis};

mod common;

use common::{dense_design, dense_residual, dense_sigma, gaussian_log_density, LN_2PI};

fn scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        study_days: 60,
        extent_km: 15.0,
        outdoor_sites: 6,
        indoor_sites: 3,
        aggregate_sites: 5,
        outdoor_window: (26, 36),
        indoor_window: (4, 8),
        aggregate_readings: (1, 3),
        ..ScenarioConfig::default()
    }
}

fn config(delta: f64) -> ModelConfig {
    ModelConfig {
        basis: BasisSpec {
            spatial_knots: 5,
            temporal_knots: 7,
            interaction: false,
        },
        delta,
        ..ModelConfig::default()
    }
}

/// Random but fixed anchors for every aggregate reading.
fn anchors(ds: &Dataset, seed: u64) -> Anchors {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.readings
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind == ReadingKind::Bca)
        .map(|(i, r)| (i, (0..r.span_days).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

fn system(seed: u64, delta: f64) -> (Dataset, AssembledSystem, Anchors) {
    let (ds, _) = simulate(&scenario(seed)).unwrap();
    let cfg = config(delta);
    let locs: Vec<SpacePoint> = ds.sites.iter().map(|s| s.point).collect();
    let basis = SmoothBasis::from_sites(cfg.basis, &locs, ds.schema.width()).unwrap();
    let a = anchors(&ds, seed + 100);
    let sys = AssembledSystem::new(&ds, basis, &cfg, &a, HyperParams::default()).unwrap();
    (ds, sys, a)
}

/// Dataset-order index of each system row.
fn row_order(sys: &AssembledSystem) -> Vec<usize> {
    sys.rows.iter().map(|r| r.reading).collect()
}

fn test_hyper() -> HyperParams {
    HyperParams {
        sigma2_u: 0.08,
        theta_s: 0.8,
        theta_t: 1.5,
        ..HyperParams::default()
    }
}

#[test]
fn sigma_matches_dense_assembly() {
    let (ds, sys, a) = system(3, 1e-6);
    assert!(ds.readings.len() >= 200, "{} readings", ds.readings.len());
    let h = test_hyper();
    let got = sys.sigma_y(&h).unwrap().to_dense();
    let want = dense_sigma(&ds, &a, &h, 7.0);
    let order = row_order(&sys);
    let mut worst = 0.0f64;
    for p in 0..order.len() {
        for q in 0..order.len() {
            worst = worst.max((got[(p, q)] - want[(order[p], order[q])]).abs());
        }
    }
    assert!(worst <= 1e-12, "max abs diff {worst}");
}

#[test]
fn marginal_matches_dense_marginalization() {
    for seed in [3, 4, 5] {
        let (ds, sys, a) = system(seed, 0.1);
        let h = test_hyper();
        let q = sys.prior_precision(&h).unwrap();
        let hm = dense_design(&ds, &sys, &a, &h);
        let sigma = dense_sigma(&ds, &a, &h, 7.0);
        let cov = &hm * q.clone().try_inverse().unwrap() * hm.transpose() + sigma;
        let want = gaussian_log_density(&dense_residual(&ds, &a, &h), &cov);
        let got = sys.evaluate(&h).unwrap().log_likelihood;
        assert!((got - want).abs() <= 1e-8, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn conditional_matches_dense_gls() {
    let (ds, sys, a) = system(6, 0.1);
    let h = test_hyper();
    let q = sys.prior_precision(&h).unwrap();
    let hm = dense_design(&ds, &sys, &a, &h);
    let si = dense_sigma(&ds, &a, &h, 7.0).try_inverse().unwrap();
    let prec = &q + hm.transpose() * &si * &hm;
    let mean = prec.clone().cholesky().unwrap().solve(&(hm.transpose() * &si * dense_residual(&ds, &a, &h)));
    let cond = sys.conditional_v(&h).unwrap();
    assert!((&cond.mean - &mean).amax() <= 1e-8 * mean.amax().max(1.0));
    let cov = prec.try_inverse().unwrap();
    assert!((cond.covariance() - &cov).amax() <= 1e-8 * cov.amax());
}

#[test]
fn single_observation_scalar_marginal() {
    let sites = vec![Site {
        id: SiteId("s".into()),
        point: SpacePoint::new(0.0, 0.0),
    }];
    let schema = CovariateSchema::intercept_only();
    let mut cov = CovariateTable::default();
    cov.insert(&schema, 0, 10, vec![]).unwrap();
    let y = 0.7;
    let ds = Dataset::new(
        schema,
        sites,
        vec![MonitorReading {
            site: 0,
            kind: ReadingKind::Bco,
            start_day: 10,
            span_days: 1,
            y,
        }],
        cov,
    )
    .unwrap();
    let cfg = ModelConfig {
        flags: ModelFlags { u: false, gst: false, a: false },
        delta: 0.25,
        ..config(0.25)
    };
    let knots = vec![SpacePoint::new(0.0, 0.0), SpacePoint::new(5.0, 0.0), SpacePoint::new(0.0, 5.0)];
    let basis = SmoothBasis::with_knots(cfg.basis, knots, 1).unwrap();
    let h = HyperParams::default();
    let sys = AssembledSystem::new(&ds, basis, &cfg, &Anchors::new(), h).unwrap();
    // scalar marginal: y ~ N(0, c^T Q^{-1} c + sigma2_o)
    let c = dense_design(&ds, &sys, &Anchors::new(), &h);
    let qi = sys.prior_precision(&h).unwrap().try_inverse().unwrap();
    let var = (&c * qi * c.transpose())[(0, 0)] + h.sigma2_o;
    let want = -0.5 * (LN_2PI + var.ln() + y * y / var);
    let got = sys.evaluate(&h).unwrap().log_likelihood;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn shuffled_rows_give_identical_marginal() {
    let (mut ds, sys, a) = system(7, 1e-6);
    let h = test_hyper();
    let base = sys.log_marginal(&h);
    // reverse the reading order and remap anchors
    let n = ds.readings.len();
    ds.readings.reverse();
    let a2: Anchors = a.into_iter().map(|(i, v)| (n - 1 - i, v)).collect();
    let cfg = config(1e-6);
    let sys2 = AssembledSystem::new(&ds, sys.basis.clone(), &cfg, &a2, HyperParams::default()).unwrap();
    let other = sys2.log_marginal(&h);
    assert!((base - other).abs() <= 1e-9 * base.abs(), "{base} vs {other}");
}

#[test]
fn zero_rows_return_prior() {
    let (mut ds, _, _) = system(8, 0.1);
    ds.readings.clear();
    let locs = vec![SpacePoint::new(0.0, 0.0), SpacePoint::new(5.0, 0.0), SpacePoint::new(0.0, 5.0)];
    let cfg = config(0.1);
    let basis = SmoothBasis::with_knots(cfg.basis, locs, 1).unwrap();
    let h = test_hyper();
    let sys = AssembledSystem::new(&ds, basis, &cfg, &Anchors::new(), h).unwrap();
    let cond = sys.conditional_v(&h).unwrap();
    assert!(cond.mean.amax() == 0.0);
    let prior_cov = sys.prior_precision(&h).unwrap().try_inverse().unwrap();
    assert!((cond.covariance() - prior_cov).amax() <= 1e-10);
}

#[test]
fn tiny_smoothing_variance_shrinks_coefficients() {
    let (_, sys, _) = system(9, 1e-6);
    let h = HyperParams {
        tau2_s: 1e-12,
        tau2_t: 1e-12,
        ..test_hyper()
    };
    let cond = sys.conditional_v(&h).unwrap();
    let lay = &sys.layout.trend;
    for i in lay.spatial.start + sys.basis.spatial_unpenalized..lay.spatial.end {
        assert!(cond.mean[i].abs() <= 1e-5, "spatial {i}: {}", cond.mean[i]);
    }
    for i in lay.temporal.clone() {
        assert!(cond.mean[i].abs() <= 1e-5, "temporal {i}: {}", cond.mean[i]);
    }
}

#[test]
fn marginal_is_continuous() {
    let (_, sys, _) = system(10, 1e-6);
    let z = sys.space.to_vector(&test_hyper());
    let base = sys.log_marginal_gamma(&z);
    assert!(base.is_finite());
    for k in 0..z.len() {
        let mut zp = z.clone();
        zp[k] += 1e-8;
        let v = sys.log_marginal_gamma(&zp);
        assert!((v - base).abs() <= 1e-4, "coordinate {k}: {}", v - base);
    }
}

#[test]
fn conditional_draws_center_on_mean() {
    let (_, sys, _) = system(11, 0.1);
    let cond = sys.conditional_v(&test_hyper()).unwrap();
    let cov = cond.covariance();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let mut acc = DVector::zeros(cond.mean.len());
    for _ in 0..n {
        acc += cond.sample(&mut rng);
    }
    acc /= n as f64;
    for i in 0..acc.len() {
        let se = (cov[(i, i)] / n as f64).sqrt();
        assert!((acc[i] - cond.mean[i]).abs() <= 4.0 * se, "component {i}");
    }
}

#[test]
fn daily_only_without_u_is_diagonal() {
    let (mut ds, _, _) = system(13, 1e-6);
    ds.readings.retain(|r| r.kind.is_daily());
    let cfg = ModelConfig {
        flags: ModelFlags { u: false, gst: false, a: false },
        ..config(1e-6)
    };
    let locs: Vec<SpacePoint> = ds.sites.iter().map(|s| s.point).collect();
    let basis = SmoothBasis::from_sites(cfg.basis, &locs, 1).unwrap();
    let sys = AssembledSystem::new(&ds, basis, &cfg, &Anchors::new(), HyperParams::default()).unwrap();
    let s = sys.sigma_y(&HyperParams::default()).unwrap();
    assert_eq!(s.nnz_lower(), s.dim());
}

#[test]
fn factor_has_no_fill_outside_envelope() {
    for seed in [14, 15] {
        let (_, sys, _) = system(seed, 1e-6);
        let s = sys.sigma_y(&test_hyper()).unwrap();
        let f = stfusion::covariance::CholeskyFactor::factor(&s).unwrap();
        assert_eq!(f.fill_outside_envelope(&s, sys.border_start()), 0);
    }
}
