//! Sparse covariance of the short-range process over a simulated network and
//! its Cholesky factor.
//!
//! cargo run --release --example sparse_factor

use std::time::Instant;

use stfusion::covariance::{assemble_cov_u, CholeskyFactor, KernelSpec, LatentPoint, SymbolicCholesky};
use stfusion::simulate::{simulate, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig {
        study_days: 2800,
        outdoor_sites: 40,
        outdoor_window: (150, 220),
        indoor_sites: 0,
        aggregate_sites: 0,
        ..ScenarioConfig::default()
    };
    let (ds, _) = simulate(&cfg)?;
    let mut points: Vec<LatentPoint> = ds
        .readings
        .iter()
        .map(|r| LatentPoint {
            site: r.site,
            point: ds.sites[r.site].point,
            day: r.start_day,
        })
        .collect();
    points.sort_by_key(|p| (p.day, p.site));
    println!("{} latent points", points.len());

    let spec = KernelSpec::new(0.098, 0.054, 0.12);
    let t = Instant::now();
    let cov = assemble_cov_u(&points, &spec)?;
    println!("assembled in {:.1?}, fill fraction {:.4}", t.elapsed(), cov.fill_fraction());

    let shifted = cov.with_diagonal_added(&vec![0.045; cov.dim()]);
    let sym = SymbolicCholesky::analyze(&shifted);
    let t = Instant::now();
    let chol = CholeskyFactor::factor_with(&shifted, &sym)?;
    println!(
        "factor: {} nonzeros against {} in the lower triangle, {:.1?}",
        chol.nnz(),
        shifted.nnz_lower(),
        t.elapsed()
    );
    println!("log determinant {:.4}", chol.log_det());

    let b = vec![1.0; chol.dim()];
    let x = chol.solve(&b);
    let r = shifted.mul_vec(&x);
    let resid = r.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max residual of a solve: {resid:.2e}");
    Ok(())
}
