#![allow(dead_code)]

pub mod compare;
pub mod oracle;

use dualcan::datagen::{Domain, NoiseFlags, NoisyDataset};
use dualcan::model::{init_model, Model, ModelConfig};
use rand::Rng;

/// A random small correction problem: model, labeled dataset and options.
pub struct Instance {
    pub model: Model,
    pub dataset: NoisyDataset,
    pub p: f64,
    pub eta: f64,
    pub feature_correction: bool,
    pub label_correction: bool,
    pub percentile: Option<f64>,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = dualcan::rng::seeded(seed);
    let k = rng.random_range(2..=3);
    let d = rng.random_range(1..=4);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(2..=50);
    let hidden = if rng.random_bool(0.5) { vec![] } else { vec![rng.random_range(1..=5)] };
    let model = init_model(&ModelConfig {
        input_dim: d,
        hidden_dims: hidden,
        feature_dim: m,
        num_classes: k,
        init_scale: rng.random_range(0.5..3.0),
        seed: rng.random(),
    })
    .unwrap();
    // integer grids produce exact ties in losses and distances
    let grid = rng.random_bool(0.3);
    let features: Vec<f64> = (0..n * d)
        .map(|_| {
            if grid {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect();
    // some classes may be missing entirely
    let classes = if rng.random_bool(0.2) { k - 1 } else { k };
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let dataset = NoisyDataset::new(
        features,
        d,
        k,
        Some(labels.clone()),
        labels,
        vec![NoiseFlags::default(); n],
        Domain::Source,
    )
    .unwrap();
    Instance {
        model,
        dataset,
        p: rng.random_range(0.01..0.99),
        eta: if rng.random_bool(0.2) { [0.0, 1.0][rng.random_range(0..2)] } else { rng.random_range(0.0..=1.0) },
        feature_correction: rng.random_bool(0.8),
        label_correction: rng.random_bool(0.8),
        percentile: rng.random_bool(0.2).then(|| rng.random_range(1.0..=100.0)),
    }
}
