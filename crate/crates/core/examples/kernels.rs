//! Spatial and temporal correlation functions of the short-range process.
//!
//! cargo run --release --example kernels

use stfusion::covariance::{matern, tapered_temporal, KernelSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = KernelSpec::new(0.098, 0.054, 0.12);

    println!("lag  tapered  untapered");
    for h in 0..=8 {
        let h = h as f64;
        let untapered = (-spec.theta_t * h).exp();
        println!("{h:>3}  {:.5}  {:.5}", tapered_temporal(h, spec.theta_t, spec.taper_range)?, untapered);
    }

    println!("\nkm   matern(nu = 1, 2, 3)");
    for d in [0.0, 5.0, 10.0, 20.0, 35.0, 50.0] {
        let row: Vec<String> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&nu| matern(d, spec.theta_s, nu).map(|c| format!("{c:.4}")))
            .collect::<Result<_, _>>()?;
        println!("{d:>4}  {}", row.join("  "));
    }

    // bisection for the distance where the nu = 2 correlation falls to 0.05
    let (mut lo, mut hi) = (0.0, 200.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if spec.spatial(mid) > 0.05 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    println!("\ncorrelation reaches 0.05 at {:.2} km", 0.5 * (lo + hi));
    println!("covariance at 3 km, 2 days: {:.5}", spec.covariance(3.0, 2.0));
    Ok(())
}
