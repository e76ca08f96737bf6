//! Proper scoring rules for Gaussian predictive distributions.
//!
//! cargo run --release --example scoring

use stfusion::cv::score_predictions;
use stfusion::scoring::{crps_gaussian, gaussian_interval, interval_score, prequential_score};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mean, sd, alpha) = (0.0, 1.0, 0.05);
    let (lo, hi) = gaussian_interval(mean, sd, alpha);
    println!("95% interval [{lo:.4}, {hi:.4}]");
    println!("   x   interval    crps   log density");
    for x in [-3.0, -1.96, 0.0, 0.5, 2.5] {
        println!(
            "{x:>5}  {:>8.4}  {:.4}  {:>8.4}",
            interval_score(lo, hi, x, alpha)?,
            crps_gaussian(mean, sd, x)?,
            prequential_score(mean, sd * sd, x)?
        );
    }

    let observed = [0.3, -0.2, 1.1, 0.8, -0.5];
    let predicted = [0.2, 0.0, 0.9, 0.4, -0.6];
    for s in [0.1, 0.3, 1.0] {
        let f = score_predictions(&observed, &predicted, &[s; 5], alpha)?;
        println!(
            "sd {s}: coverage {:.2} width {:.3} interval {:.3} crps {:.3} log {:.3}",
            f.coverage, f.width, f.interval, f.crps, f.log_score
        );
    }
    Ok(())
}
