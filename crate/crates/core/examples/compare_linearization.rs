//! Linearized against exact nonlinear posterior on a small network without
//! the short-range process.
//!
//! cargo run --release --example compare_linearization

use std::time::Instant;

use stfusion::compare::{aggregate_slope_name, compare_linearized_nonlinear, CompareOptions};
use stfusion::prediction::PredictionGrid;
use stfusion::simulate::{simulate, ScenarioConfig};
use stfusion::smooth::BasisSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::preset("linearization").expect("known preset");
    let (ds, _) = simulate(&cfg)?;
    println!("{} readings", ds.readings.len());

    let days: Vec<u32> = (0..cfg.study_days).step_by(15).collect();
    let grid = PredictionGrid::lattice(cfg.extent_km, 6, &days, &[1.0]);
    let mut opts = CompareOptions::default();
    opts.linearized.model.basis = BasisSpec {
        spatial_knots: 8,
        temporal_knots: 7,
        interaction: false,
    };
    let t = Instant::now();
    let report = compare_linearized_nonlinear(&ds, &grid, &opts)?;
    println!("{}", report.format());
    println!(
        "largest standardized difference apart from {}: {:.3}",
        aggregate_slope_name(),
        report.max_difference_excluding(&[aggregate_slope_name()])
    );
    println!("lag-1 log target autocorrelation: {:?}", report.nonlinear_log_target_lag1);
    println!("elapsed {:.1?}", t.elapsed());
    Ok(())
}
