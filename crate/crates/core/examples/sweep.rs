//! Noise-level sweep of the full method against the no-correction baseline.
//!
//! ```text
//! cargo run --release --example sweep [jobs]
//! ```

use dualcan::config::Experiment;
use dualcan::eval::{noise_sweep, sweep_checks, Method};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let jobs: usize = std::env::args().nth(1).map_or(Ok(4), |s| s.parse())?;
    let exp = Experiment::reference();
    let sweep = exp.sweep.clone().expect("reference has a sweep section");
    let result = noise_sweep(&exp, &sweep.levels, &[Method::Full, Method::NoCorrection], &sweep.seeds, jobs)?;
    print!("{}", result.to_csv());
    print!("{}", sweep_checks(&result).to_text());
    Ok(())
}
