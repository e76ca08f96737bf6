//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use stfusion::covariance::{matern, tapered_temporal};
use stfusion::data::{Dataset, ReadingKind};
use stfusion::hyper::HyperParams;
use stfusion::joint::{Anchors, AssembledSystem};

pub mod penalty;
pub mod sampler;

/// Detail line of a passed or failed check.
pub type Outcome = Result<String, String>;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn softmax_weights(anchor: &[f64], slope: f64) -> (Vec<f64>, f64) {
    let ex: Vec<f64> = anchor.iter().map(|e| (slope * e).exp()).collect();
    let total: f64 = ex.iter().sum();
    let w: Vec<f64> = ex.iter().map(|e| slope * e / total).collect();
    let offset = total.ln() - w.iter().zip(anchor).map(|(b, e)| b * e).sum::<f64>();
    (w, offset)
}

/// Latent weights per reading, in dataset order.
pub fn reading_weights(ds: &Dataset, a: &Anchors, h: &HyperParams) -> Vec<(Vec<f64>, f64)> {
    ds.readings
        .iter()
        .enumerate()
        .map(|(i, r)| match r.kind {
            ReadingKind::Bco => (vec![1.0], 0.0),
            ReadingKind::Bci => (vec![h.alpha_1i], 0.0),
            ReadingKind::Bca => softmax_weights(&a[&i], h.alpha_1a),
        })
        .collect()
}

/// Dense residual covariance in dataset order.
pub fn dense_sigma(ds: &Dataset, a: &Anchors, h: &HyperParams, taper: f64) -> DMatrix<f64> {
    let w = reading_weights(ds, a, h);
    let n = ds.readings.len();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (ri, rj) = (&ds.readings[i], &ds.readings[j]);
            let d = ds.sites[ri.site].point.distance(&ds.sites[rj.site].point);
            let mut acc = 0.0;
            for (di, wi) in ri.days().zip(&w[i].0) {
                for (dj, wj) in rj.days().zip(&w[j].0) {
                    let lag = (di as f64 - dj as f64).abs();
                    acc += wi * wj * h.sigma2_u * matern(d, h.theta_s, 2.0).unwrap() * tapered_temporal(lag, h.theta_t, taper).unwrap();
                }
            }
            s[(i, j)] = acc;
        }
        s[(i, i)] += match ds.readings[i].kind {
            ReadingKind::Bco => h.sigma2_o,
            ReadingKind::Bci => h.sigma2_i,
            ReadingKind::Bca => h.sigma2_a + h.sigma2_alpha0,
        };
    }
    s
}

/// Dense coefficient design in dataset order, built from the basis rows.
pub fn dense_design(ds: &Dataset, sys: &AssembledSystem, a: &Anchors, h: &HyperParams) -> DMatrix<f64> {
    let w = reading_weights(ds, a, h);
    let lay = &sys.layout;
    let mut hm = DMatrix::zeros(ds.readings.len(), sys.n_coef());
    for (i, r) in ds.readings.iter().enumerate() {
        let p = ds.sites[r.site].point;
        for (d, wd) in r.days().zip(&w[i].0) {
            let row = sys.basis.design_row(&p, d, ds.covariate_row(r.site, d).unwrap()).unwrap();
            for (j, v) in row.iter().enumerate() {
                hm[(i, j)] += wd * v;
            }
        }
        match r.kind {
            ReadingKind::Bci => {
                hm[(i, lay.indoor.unwrap())] = 1.0;
                let k = lay.household_sites.iter().position(|&s| s == r.site).unwrap();
                hm[(i, lay.households.start + k)] = 1.0;
            }
            ReadingKind::Bca => hm[(i, lay.aggregate.unwrap())] = 1.0,
            ReadingKind::Bco => {}
        }
    }
    hm
}

pub fn dense_residual(ds: &Dataset, a: &Anchors, h: &HyperParams) -> DVector<f64> {
    let w = reading_weights(ds, a, h);
    DVector::from_iterator(ds.readings.len(), ds.readings.iter().zip(&w).map(|(r, (_, g))| r.y - g))
}

pub fn gaussian_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = x.dot(&chol.solve(x));
    -0.5 * (x.len() as f64 * LN_2PI + logdet + quad)
}

/// Adaptive Simpson on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

pub fn mean_cov(xs: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

