use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
mod common;

use stfusion::inference::{adaptive_rwmh, ess, maximize, AdaptConfig, ModeOptions, SamplerSettings};

#[test]
fn two_dimensional_normal_target() {
    common::sampler::normal_2d().unwrap();
}

#[test]
fn gamma_product_quantiles() {
    common::sampler::gamma_product().unwrap();
}

#[test]
fn geweke_joint_distribution() {
    common::sampler::geweke().unwrap();
}

#[test]
fn ess_of_iid_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let e = ess(&x).unwrap().value;
    assert!((9_000.0..=11_000.0).contains(&e), "{e}");
}

#[test]
fn ess_of_ar1_sequence() {
    common::sampler::ar1_ess().unwrap();
}

#[test]
fn adaptation_disabled_keeps_initial_proposal() {
    let target = |z: &[f64]| -0.5 * z[0] * z[0];
    let mut s = SamplerSettings::new(5000);
    s.adapt = AdaptConfig {
        enabled: false,
        ..AdaptConfig::default()
    };
    s.initial_cov = Some(DMatrix::from_element(1, 1, 4.0));
    let chain = adaptive_rwmh(&target, &[0.0], &s, 1, 0).unwrap();
    assert_eq!(chain.proposal[(0, 0)], 4.0);
    assert_eq!(chain.warmup, 0);
}

#[test]
fn multistart_mode_agrees() {
    let f = |z: &[f64]| {
        let q = (z[0] - 1.0).powi(2) + 2.0 * (z[1] + 0.5).powi(2) + 0.5 * (z[0] - 1.0) * (z[1] + 0.5);
        -q - (1.0 + q).ln()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let modes: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let init = [rng.gen_range(-1.0..2.0), rng.gen_range(-2.0..1.0)];
            maximize(f, &init, &ModeOptions::default()).unwrap().z
        })
        .collect();
    for m in &modes {
        assert!((m[0] - 1.0).abs() < 1e-3 && (m[1] + 0.5).abs() < 1e-3, "{m:?}");
    }
}
