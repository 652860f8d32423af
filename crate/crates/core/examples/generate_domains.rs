//! Draws the reference source/target pair and prints per-class means of each
//! domain, showing the rotation and translation between them.
//!
//! ```text
//! cargo run --example generate_domains
//! ```

use dualcan::config::Experiment;
use dualcan::datagen::{make_domain_pair, NoisyDataset};

fn class_means(ds: &NoisyDataset) -> Vec<Vec<f64>> {
    let labels = ds.ground_truth().clean_labels;
    let mut sums = vec![vec![0.0; ds.dim()]; ds.num_classes()];
    let mut counts = vec![0usize; ds.num_classes()];
    for (row, &y) in ds.rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = Experiment::reference().domain;
    let (source, target) = make_domain_pair(&spec)?;
    println!("{} source rows, {} target rows, d={}", source.len(), target.len(), source.dim());
    let (ms, mt) = (class_means(&source), class_means(&target));
    for k in 0..spec.num_classes {
        println!(
            "class {k}: nominal {:?}  source mean {:.3?}  target mean {:.3?}  shift of nominal {:.3?}",
            spec.class_center(k),
            ms[k],
            mt[k],
            spec.shift(&spec.class_center(k))
        );
    }
    Ok(())
}
