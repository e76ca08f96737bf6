//! First-order expansion of the multiday aggregation map.
//!
//! cargo run --release --example linearize

use stfusion::observation::{g_aggregate, linearize_aggregate, naive_linearization};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let slope = 0.7;
    let week = [0.2, 0.5, -0.1, 0.9, 1.4, 0.3, -0.4];

    let exact = g_aggregate(&week, slope)?;
    let at_truth = linearize_aggregate(&week, slope)?;
    let flat = vec![week.iter().sum::<f64>() / week.len() as f64; week.len()];
    let at_mean = linearize_aggregate(&flat, slope)?;
    let naive = naive_linearization(week.len(), slope);

    let apply = |l: &stfusion::observation::LinearizedAggregate| {
        l.offset + l.weights.iter().zip(&week).map(|(b, e)| b * e).sum::<f64>()
    };
    println!("exact        {exact:.5}");
    println!("at the truth {:.5}", apply(&at_truth));
    println!("at the mean  {:.5}", apply(&at_mean));
    println!("naive        {:.5}", apply(&naive));

    println!("\nday  weight(truth)  weight(naive)");
    for (j, (a, b)) in at_truth.weights.iter().zip(&naive.weights).enumerate() {
        println!("{j:>3}  {a:.4}         {b:.4}");
    }
    println!("weights sum to the slope: {:.6}", at_truth.weights.iter().sum::<f64>());
    Ok(())
}
