//! Corrupts one clean source domain with each noise kind and reports the
//! realized channel rates next to the requested ones.
//!
//! ```text
//! cargo run --example corrupt [p_noise]
//! ```

use dualcan::config::Experiment;
use dualcan::datagen::{corrupt, make_domain_pair, NoiseKind, NoiseSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p: f64 = std::env::args().nth(1).map_or(Ok(0.4), |s| s.parse())?;
    let mut spec = Experiment::reference().domain;
    spec.samples_per_class = 2000;
    let (clean, _) = make_domain_pair(&spec)?;
    println!("kind          requested(label, feature)  realized(label, feature)  both");
    for kind in [NoiseKind::LabelOnly, NoiseKind::FeatureOnly, NoiseKind::Mixed] {
        let noise = NoiseSpec {
            p_noise: p,
            kind,
            seed: 3,
            ..NoiseSpec::none()
        };
        if noise.validate().is_err() {
            println!("{:<12}  p={p} out of range", format!("{kind:?}"));
            continue;
        }
        let ds = corrupt(&clean, &noise)?;
        let flags = ds.ground_truth().noise_flags;
        let n = flags.len() as f64;
        let frac = |f: &dyn Fn(&dualcan::datagen::NoiseFlags) -> bool| flags.iter().filter(|x| f(x)).count() as f64 / n;
        let (rl, rf) = noise.channel_rates();
        println!(
            "{:<12}  ({rl:.3}, {rf:.3})             ({:.3}, {:.3})            {:.3}",
            format!("{kind:?}"),
            frac(&|x| x.label_corrupted),
            frac(&|x| x.feature_corrupted),
            frac(&|x| x.label_corrupted && x.feature_corrupted)
        );
    }
    Ok(())
}
