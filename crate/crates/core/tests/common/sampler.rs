//! Sampler checks against targets with known answers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Gamma};
use stfusion::inference::{adaptive_rwmh, ess, RwmhKernel, SamplerSettings};

use super::{mean_cov, Outcome};

fn acceptance_in_range(rate: f64) -> Result<(), String> {
    if (0.1..=0.5).contains(&rate) {
        Ok(())
    } else {
        Err(format!("acceptance {rate:.3} outside [0.1, 0.5]"))
    }
}

/// 50k iterations on a standard bivariate normal: mean within 0.05 and
/// covariance within 0.1 of the identity.
pub fn normal_2d() -> Outcome {
    let target = |z: &[f64]| -0.5 * (z[0] * z[0] + z[1] * z[1]);
    let chain = adaptive_rwmh(&target, &[3.0, -3.0], &SamplerSettings::new(50_000), 11, 0).map_err(|e| e.to_string())?;
    let kept: Vec<Vec<f64>> = chain.states[chain.warmup..].to_vec();
    let (mean, cov) = mean_cov(&kept);
    let mean_err = mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cov_err = (cov - DMatrix::<f64>::identity(2, 2)).amax();
    acceptance_in_range(chain.acceptance_rate())?;
    let detail = format!("mean error {mean_err:.3}, covariance error {cov_err:.3}");
    if mean_err < 0.05 && cov_err < 0.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Product of Gamma densities: sample quantiles within four delta-method
/// standard errors of the analytic ones.
pub fn gamma_product() -> Outcome {
    let shapes = [(2.0, 1.0), (5.0, 2.0)];
    let target = |z: &[f64]| {
        if z.iter().any(|v| *v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        shapes
            .iter()
            .zip(z)
            .map(|((k, rate), x)| (k - 1.0) * x.ln() - rate * x)
            .sum()
    };
    let chain = adaptive_rwmh(&target, &[1.0, 1.0], &SamplerSettings::new(100_000), 5, 0).map_err(|e| e.to_string())?;
    acceptance_in_range(chain.acceptance_rate())?;
    let mut worst = 0.0f64;
    for (k, (shape, r)) in shapes.iter().enumerate() {
        let xs: Vec<f64> = chain.states[chain.warmup..].iter().map(|s| s[k]).collect();
        let n_eff = ess(&xs).map_err(|e| e.to_string())?.value;
        let dist = Gamma::new(*shape, *r).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for p in [0.1, 0.5, 0.9] {
            let q = dist.inverse_cdf(p);
            let emp = sorted[(p * sorted.len() as f64) as usize];
            let se = (p * (1.0 - p) / n_eff).sqrt() / dist.pdf(q);
            worst = worst.max((emp - q).abs() / se);
        }
    }
    let detail = format!("largest quantile error {worst:.2} standard errors");
    if worst < 4.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Joint-distribution test on a conjugate normal model with a fixed
/// random-walk kernel: 20 test functions, all |z| < 4.
pub fn geweke() -> Outcome {
    let n_obs = 5;
    let test_fns = |theta: f64, y: &[f64]| -> Vec<f64> {
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let mut g = vec![theta, theta * theta];
        g.extend(y.iter().copied());
        g.extend(y.iter().map(|v| v * v));
        g.extend(y.iter().map(|v| theta * v));
        g.extend([ybar * ybar, theta * ybar * ybar, theta.cos()]);
        g
    };
    let m = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draw_y = |theta: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n_obs).map(|_| theta + rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut marginal: Vec<Vec<f64>> = Vec::with_capacity(m);
    for _ in 0..m {
        let theta: f64 = rng.sample(StandardNormal);
        let y = draw_y(theta, &mut rng);
        marginal.push(test_fns(theta, &y));
    }
    let kernel = RwmhKernel::new(&DMatrix::from_element(1, 1, 0.5)).ok_or("singular proposal")?;
    let mut theta = [0.0];
    let mut y = draw_y(0.0, &mut rng);
    let mut successive: Vec<Vec<f64>> = Vec::with_capacity(m);
    for _ in 0..m {
        let yy = y.clone();
        let post = move |z: &[f64]| -0.5 * z[0] * z[0] - 0.5 * yy.iter().map(|v| (v - z[0]).powi(2)).sum::<f64>();
        let mut lp = post(&theta);
        kernel.step(&post, &mut theta, &mut lp, &mut rng);
        y = draw_y(theta[0], &mut rng);
        successive.push(test_fns(theta[0], &y));
    }
    let nf = marginal[0].len();
    let mut worst = 0.0f64;
    for f in 0..nf {
        let a: Vec<f64> = marginal.iter().map(|g| g[f]).collect();
        let b: Vec<f64> = successive.iter().map(|g| g[f]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let se = (var(&a, ma) / m as f64 + var(&b, mb) / ess(&b).map_err(|e| e.to_string())?.value).sqrt();
        worst = worst.max(((ma - mb) / se).abs());
    }
    let detail = format!("{nf} test functions, largest |z| {worst:.2}");
    if nf == 20 && worst < 4.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Effective size of a long AR(1) sequence within 25% of `n (1 - rho) / (1 + rho)`.
pub fn ar1_ess() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rho: f64 = 0.95;
    let n = 100_000;
    let mut x = Vec::with_capacity(n);
    let mut v = 0.0;
    for _ in 0..n {
        v = rho * v + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
        x.push(v);
    }
    let want = n as f64 * (1.0 - rho) / (1.0 + rho);
    let got = ess(&x).map_err(|e| e.to_string())?.value;
    let rel = ((got - want) / want).abs();
    let detail = format!("ess {got:.0} against {want:.0} ({:.1}% off)", 100.0 * rel);
    if rel < 0.25 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
