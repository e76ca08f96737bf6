//! Spatial cross-validation of the model with and without multiday readings.
//!
//! cargo run --release --example cross_validate

use stfusion::config::RunConfig;
use stfusion::cv::{cv_partition, format_table, run_cv};
use stfusion::hyper::ModelFlags;
use stfusion::simulate::{simulate, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ds, _) = simulate(&ScenarioConfig::preset("small").expect("known preset"))?;
    let cfg = RunConfig {
        spatial_knots: 5,
        temporal_knots: 6,
        delta: 0.1,
        ..RunConfig::default()
    };
    let partition = cv_partition(&ds, &cfg.partition_options())?;
    for (k, g) in partition.groups.iter().enumerate() {
        let ids: Vec<&str> = g.iter().map(|&s| ds.sites[s].id.0.as_str()).collect();
        println!("fold {k}: {}", ids.join(" "));
    }
    let mut reports = Vec::new();
    for a in [false, true] {
        let flags = ModelFlags { u: true, gst: false, a };
        reports.push(run_cv(&ds, flags, &partition, &cfg.cv_options())?);
    }
    print!("{}", format_table(&reports));
    Ok(())
}
