//! Compares analytic gradients of both training objectives with central
//! finite differences on a small random model.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use dualcan::model::{
    consistency_views, init_model, loss_grad_source, loss_grad_target, AugmentSpec, Disturbance, Head, Model,
    ModelConfig, SourceSample,
};

fn numeric(model: &Model, range: std::ops::Range<usize>, f: impl Fn(&Model) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let base = model.to_flat();
    let mut probe = model.clone();
    range
        .map(|j| {
            let mut v = base.clone();
            v[j] += h;
            probe.set_flat(&v).unwrap();
            let up = f(&probe);
            v[j] -= 2.0 * h;
            probe.set_flat(&v).unwrap();
            (up - f(&probe)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = init_model(&ModelConfig {
        input_dim: 2,
        hidden_dims: vec![6, 5],
        feature_dim: 4,
        num_classes: 3,
        init_scale: 1.0,
        seed: 42,
    })?;
    let rows = [vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.7, 2.0]];
    let mu = [0.3, -0.2, 0.1, 0.4];
    let batch: Vec<SourceSample> = rows
        .iter()
        .enumerate()
        .map(|(i, x)| SourceSample {
            x,
            label: i,
            disturbance: (i != 1).then_some(Disturbance { eta: 0.4, centroid: &mu }),
        })
        .collect();
    let [_, _, tgt] = model.flat_ranges();
    let (_, g) = loss_grad_source(&model, &batch)?;
    let fd = numeric(&model, 0..tgt.start, |m| loss_grad_source(m, &batch).unwrap().0);
    println!("source objective: {} params, max rel err {:.2e}", fd.len(), rel_err(&g.to_flat(&model)[..tgt.start], &fd));

    let aug = AugmentSpec::scaled(1.0, 7);
    let tb: Vec<(&[f64], usize)> = rows.iter().enumerate().map(|(i, x)| (x.as_slice(), (i + 1) % 3)).collect();
    let (_, g) = loss_grad_target(&model, &tb, &aug, 1.0)?;
    let weak: Vec<Vec<f64>> = tb
        .iter()
        .enumerate()
        .map(|(i, (x, _))| model.predict(Head::Target, &consistency_views(x, &aug, i).0).unwrap())
        .collect();
    let fd = numeric(&model, tgt.clone(), |m| {
        tb.iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let p = m.predict(Head::Target, x).unwrap();
                let s = m.predict(Head::Target, &consistency_views(x, &aug, i).1).unwrap();
                -p[*y].ln() - weak[i].iter().zip(&s).map(|(q, s)| q * s.ln()).sum::<f64>()
            })
            .sum::<f64>()
            / tb.len() as f64
    });
    println!("target objective: {} params, max rel err {:.2e}", fd.len(), rel_err(&g.to_flat(&model)[tgt], &fd));
    Ok(())
}
