//! Roughness-penalty checks against quadrature.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfusion::data::SpacePoint;
use stfusion::smooth::{temporal_knot_days, BasisSpec, ConstraintMap, SmoothBasis};

use super::{adaptive_simpson, Outcome};

pub fn sites(n: usize, seed: u64) -> Vec<SpacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SpacePoint {
            x_km: rng.gen_range(0.0..25.0),
            y_km: rng.gen_range(0.0..25.0),
        })
        .collect()
}

/// Second derivative in unit-period time of the smooth with free coefficients `w`.
pub fn second_derivative(map: &ConstraintMap, w: &[f64], u: f64) -> f64 {
    let raw = &map.z * DVector::from_column_slice(w);
    map.knots
        .iter()
        .enumerate()
        .map(|(j, t)| raw[j + 1] * 6.0 * (u - t).abs())
        .sum()
}

/// Quadratic form against adaptive quadrature of the squared second
/// derivative, 20 random coefficient vectors, 1e-6 relative.
pub fn temporal_quadrature() -> Outcome {
    let map = ConstraintMap::periodic(&temporal_knot_days(7)).map_err(|e| e.to_string())?;
    let m = map.free_penalty();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w: Vec<f64> = (0..map.free_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wv = DVector::from_column_slice(&w);
        let quad_form = (wv.transpose() * &m * &wv)[0];
        let integral = adaptive_simpson(&|u| second_derivative(&map, &w, u).powi(2), 0.0, 1.0, 1e-12);
        worst = worst.max(((quad_form - integral) / integral).abs());
    }
    let detail = format!("largest relative error {worst:.2e} over 20 vectors");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Linear functions of time and of space cost exactly nothing.
pub fn linear_is_free() -> Outcome {
    let map = ConstraintMap::periodic(&temporal_knot_days(7)).map_err(|e| e.to_string())?;
    let raw = map.raw_penalty();
    let mut w = DVector::zeros(raw.nrows());
    w[0] = 3.7;
    let temporal = (w.transpose() * &raw * &w)[0];

    let basis = SmoothBasis::from_sites(
        BasisSpec {
            spatial_knots: 6,
            temporal_knots: 7,
            interaction: false,
        },
        &sites(12, 8),
        0,
    )
    .map_err(|e| e.to_string())?;
    let p = &basis.penalties.spatial;
    let mut s = DVector::zeros(p.nrows());
    s[0] = -1.3;
    s[1] = 0.4;
    let spatial = (s.transpose() * p * &s)[0];
    let detail = format!("temporal {temporal:e}, spatial {spatial:e}");
    if temporal == 0.0 && spatial == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Value and first derivative of the temporal smooth agree across the
/// year boundary to 1e-8 for random coefficients.
pub fn periodicity(cases: usize) -> Outcome {
    let basis = SmoothBasis::from_sites(
        BasisSpec {
            spatial_knots: 5,
            temporal_knots: 7,
            interaction: false,
        },
        &sites(10, 1),
        0,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut value_gap, mut slope_gap) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let w: Vec<f64> = (0..basis.layout.temporal.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let start = basis.temporal_value(&w, 0.0);
        let end = basis.temporal_value(&w, 365.0 - 1e-9);
        value_gap = value_gap.max((start - end).abs());
        let h = 1e-5;
        let d0 = (basis.temporal_value(&w, h) - basis.temporal_value(&w, -h)) / (2.0 * h);
        let d1 = (basis.temporal_value(&w, 365.0 + h) - basis.temporal_value(&w, 365.0 - h)) / (2.0 * h);
        slope_gap = slope_gap.max((d0 - d1).abs() / (1.0 + d0.abs()));
    }
    let detail = format!("value gap {value_gap:.1e}, slope gap {slope_gap:.1e}");
    if value_gap <= 1e-8 && slope_gap <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
