//! Histogram of distance to the nearest cluster centroid after warm-up, split
//! by ground-truth noise type.
//!
//! ```text
//! cargo run --release --example distance_histogram [seed]
//! ```

use dualcan::config::Experiment;
use dualcan::eval::{distance_histogram, prepare_data};
use dualcan::model::init_model;
use dualcan::nic::nic_source;
use dualcan::trainer::{warmup, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut exp = Experiment::reference();
    if let Some(seed) = std::env::args().nth(1) {
        exp = exp.with_seed(seed.parse()?);
    }
    let (source, _) = prepare_data(&exp)?;
    let model = init_model(&exp.train.model_config(source.dim(), source.num_classes()))?;
    let model = warmup(model, &source, &exp.train, &mut TrainState::default())?;
    let pass = nic_source(&source, &model, &exp.train.nic_options(0.0))?;
    let hist = distance_histogram(source.features(), &model, &pass.clusters, source.ground_truth().noise_flags, 15)?;

    println!("   bin range        clean  feature  label");
    for b in 0..hist.edges.len() - 1 {
        println!(
            "{:>7.3} - {:<7.3} {:>6} {:>8} {:>6}",
            hist.edges[b], hist.edges[b + 1], hist.counts[0][b], hist.counts[1][b], hist.counts[2][b]
        );
    }
    let show = |m: Option<f64>| m.map_or("n/a".to_string(), |m| format!("{m:.3}"));
    println!(
        "mean distance: clean {}  feature {}  label {}",
        show(hist.means[0]),
        show(hist.means[1]),
        show(hist.means[2])
    );
    Ok(())
}
