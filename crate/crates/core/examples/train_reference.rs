//! Trains the reference task and prints the per-epoch correction curves.
//!
//! ```text
//! cargo run --release --example train_reference [seed]
//! ```

use dualcan::config::Experiment;
use dualcan::eval::{correction_curves, prepare_data};
use dualcan::trainer::run;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut exp = Experiment::reference();
    if let Some(seed) = std::env::args().nth(1) {
        exp = exp.with_seed(seed.parse()?);
    }
    let (source, target) = prepare_data(&exp)?;
    let injected = dualcan::eval::label_error(
        source.observed_labels().expect("source is labeled"),
        source.ground_truth().clean_labels,
    )?;
    let out = run(&exp.train, &source, &target)?;

    println!("epoch  phase   src_acc  tgt_acc  src_noise  pl_error  eta");
    for m in &out.history {
        println!(
            "{:>5}  {:<6}  {:.4}   {:.4}   {:.4}     {:.4}    {:.3}",
            m.epoch,
            format!("{:?}", m.phase),
            m.source_accuracy,
            m.target_accuracy,
            m.residual_source_noise_ratio,
            m.pseudo_label_error,
            m.eta
        );
    }
    let curves = correction_curves(&out.history[exp.train.warmup_epochs..]);
    println!("injected label noise {injected:.4}");
    println!(
        "residual noise delta {:+.4}, pseudo-label error delta {:+.4}",
        curves.residual_delta, curves.pseudo_label_delta
    );
    Ok(())
}
