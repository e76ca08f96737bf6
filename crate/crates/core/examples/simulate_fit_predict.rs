//! Simulate a network, fit the final model and predict the latent field.
//!
//! cargo run --release --example simulate_fit_predict

use stfusion::fit::{fit, FitOptions};
use stfusion::hyper::ModelFlags;
use stfusion::prediction::{rao_blackwell, PredictionGrid};
use stfusion::simulate::{simulate, ScenarioConfig};
use stfusion::smooth::BasisSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::preset("small").expect("known preset");
    let (ds, truth) = simulate(&cfg)?;
    println!("{} sites, {} readings", ds.sites.len(), ds.readings.len());

    let mut opts = FitOptions {
        chains: 2,
        iters: 3000,
        burn_in: 1000,
        thin: 50,
        ..FitOptions::default()
    };
    opts.model.flags = ModelFlags::FINAL;
    opts.model.basis = BasisSpec {
        spatial_knots: 5,
        temporal_knots: 6,
        interaction: false,
    };
    opts.model.delta = 0.1;
    let (result, sys) = fit(&ds, &opts)?;

    println!("\nparameter       truth     mean     2.5%    97.5%");
    for (row, p) in result.summary(&sys).iter().zip(&sys.space.params) {
        println!(
            "{:<14} {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}",
            row.name,
            p.get(&truth.hyper),
            row.mean,
            row.q025,
            row.q975
        );
    }

    // held-in sites on their reading days, against the simulated field
    let pairs: Vec<(usize, u32)> = truth.eta.keys().copied().step_by(7).take(40).collect();
    let mut grid = PredictionGrid::at_sites(&ds, &pairs)?;
    grid.want_sd = true;
    let states = result.posterior_states(&sys)?;
    let pred = rao_blackwell(&grid, &sys, &states)?;
    let sd = pred.sd.as_ref().expect("sd requested");
    let mut covered = 0;
    for (k, &(s, d)) in pairs.iter().enumerate() {
        let eta = truth.eta_at(s, d).expect("simulated point");
        covered += usize::from((eta - pred.mean[k]).abs() <= 1.96 * sd[k]);
    }
    println!("\n{covered} of {} latent values inside the 95% band", pairs.len());
    Ok(())
}
