//! Runs the five ablation rows on the reference task.
//!
//! ```text
//! cargo run --release --example ablation [jobs]
//! ```

use dualcan::config::Experiment;
use dualcan::eval::{ablation_battery, ablation_checks};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let jobs: usize = std::env::args().nth(1).map_or(Ok(4), |s| s.parse())?;
    let exp = Experiment::reference();
    let seeds = exp.ablation.clone().expect("reference has an ablation section").seeds;
    let table = ablation_battery(&exp, &seeds, jobs)?;
    for row in &table.rows {
        println!(
            "{:<22} {:.4} +- {:.4}  (n={}, failed={})",
            row.method.name(),
            row.result.mean,
            row.result.std,
            row.result.n,
            row.result.failed
        );
    }
    print!("{}", ablation_checks(&table).to_text());
    Ok(())
}
