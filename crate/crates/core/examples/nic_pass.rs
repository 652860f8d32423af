//! Warms up on the reference task, runs one correction pass on the source
//! domain and scores its verdicts against the hidden noise flags.
//!
//! ```text
//! cargo run --release --example nic_pass [seed]
//! ```

use dualcan::config::Experiment;
use dualcan::eval::{prepare_data, verdict_quality};
use dualcan::model::init_model;
use dualcan::nic::{nic_source, NoiseVerdict};
use dualcan::trainer::{warmup, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut exp = Experiment::reference();
    if let Some(seed) = std::env::args().nth(1) {
        exp = exp.with_seed(seed.parse()?);
    }
    let (source, _) = prepare_data(&exp)?;
    let model = init_model(&exp.train.model_config(source.dim(), source.num_classes()))?;
    let model = warmup(model, &source, &exp.train, &mut TrainState::default())?;
    let pass = nic_source(&source, &model, &exp.train.nic_options(exp.train.eta0))?;

    println!("trusted {} of {}, loss threshold {:.4}", pass.split.trusted.len(), source.len(), pass.split.gamma);
    for k in 0..pass.clusters.num_classes() {
        println!(
            "cluster {k}: {} members, radius {:.3}, centroid {:.3?}",
            pass.clusters.members[k].len(),
            pass.clusters.radii[k],
            pass.clusters.centroids[k]
        );
    }
    let q = verdict_quality(&pass.records, source.ground_truth().noise_flags)?;
    println!("truth \\ verdict   clean  feature  label");
    for v in NoiseVerdict::ALL {
        let row = q.confusion[v.index()];
        println!("{:<16} {:>6} {:>8} {:>6}", v.as_str(), row[0], row[1], row[2]);
    }
    for v in NoiseVerdict::ALL {
        let show = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "{:<14} precision {}  recall {}",
            v.as_str(),
            show(q.precision[v.index()]),
            show(q.recall[v.index()])
        );
    }
    Ok(())
}
