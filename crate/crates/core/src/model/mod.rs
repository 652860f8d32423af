//! Shared feature generator with a source head and a target head.
//!
//! The generator is a small tanh MLP ending in a linear `m`-wide feature
//! layer; each head is an affine `m -> K` map followed by a softmax. All
//! gradients are written out by hand for this fixed architecture.

mod augment;
mod checkpoint;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub use augment::{augment, AugmentSpec, Strength};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![32, 16],
            feature_dim: 16,
            num_classes,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::param("model dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::param("init_scale must be positive"));
        }
        Ok(())
    }

    /// Layer widths of the generator, input first, feature layer last.
    pub fn generator_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.feature_dim);
        w
    }

    pub fn parameter_count(&self) -> usize {
        let widths = self.generator_widths();
        let generator: usize = widths.windows(2).map(|p| (p[0] + 1) * p[1]).sum();
        generator + 2 * (self.feature_dim + 1) * self.num_classes
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], delta: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.fan_in];
        for (o, &d) in delta.iter().enumerate() {
            grad.bias[o] += d;
            let row = &self.weights[o * self.fan_in..(o + 1) * self.fan_in];
            let grow = &mut grad.weights[o * self.fan_in..(o + 1) * self.fan_in];
            for i in 0..self.fan_in {
                grow[i] += d * x[i];
                dx[i] += row[i] * d;
            }
        }
        dx
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub generator: Vec<Dense>,
    pub head_s: Dense,
    pub head_t: Dense,
}

pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = seeded(config.seed);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let mut d = Dense::zeros(fan_in, fan_out);
        let s = config.init_scale / (fan_in as f64).sqrt();
        for w in d.weights.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = s * z;
        }
        d
    };
    let widths = config.generator_widths();
    let generator = widths.windows(2).map(|p| layer(p[0], p[1])).collect();
    let head_s = layer(config.feature_dim, config.num_classes);
    let head_t = layer(config.feature_dim, config.num_classes);
    Ok(Model {
        generator,
        head_s,
        head_t,
    })
}

/// Hidden activations of one generator pass; `acts[0]` is the input and the
/// last entry is the feature vector.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn feature(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.generator[0].fan_in
    }

    pub fn feature_dim(&self) -> usize {
        self.head_s.fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.head_s.fan_out
    }

    pub fn head(&self, head: Head) -> &Dense {
        match head {
            Head::Source => &self.head_s,
            Head::Target => &self.head_t,
        }
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.generator.len() + 1);
        acts.push(x.to_vec());
        let last = self.generator.len() - 1;
        for (l, layer) in self.generator.iter().enumerate() {
            let mut z = layer.forward(acts.last().unwrap());
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Trace { acts }
    }

    /// Backpropagates `dL/dfeature` through the generator into `grads`.
    fn backward_generator(&self, trace: &Trace, dfeature: &[f64], grads: &mut [Dense]) {
        let mut delta = dfeature.to_vec();
        for l in (0..self.generator.len()).rev() {
            let dx = self.generator[l].backward(&trace.acts[l], &delta, &mut grads[l]);
            if l > 0 {
                delta = dx
                    .iter()
                    .zip(&trace.acts[l])
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
            }
        }
    }

    /// Generator output `G(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok(self.trace(x).acts.pop().unwrap())
    }

    /// `G` applied to each row of a row-major batch; returns a row-major
    /// `n x m` buffer.
    pub fn features_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if !xs.len().is_multiple_of(d) {
            return Err(Error::Shape {
                expected: d,
                got: xs.len() % d,
            });
        }
        let mut out = Vec::with_capacity(xs.len() / d * self.feature_dim());
        for row in xs.chunks_exact(d) {
            out.extend(self.trace(row).acts.pop().unwrap());
        }
        Ok(out)
    }

    pub fn logits_from_features(&self, head: Head, z: &[f64]) -> Vec<f64> {
        self.head(head).forward(z)
    }

    pub fn predict(&self, head: Head, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(x)?;
        Ok(softmax(&self.logits_from_features(head, &z)))
    }

    pub fn predict_from_features(&self, head: Head, z: &[f64]) -> Vec<f64> {
        softmax(&self.logits_from_features(head, z))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.values().all(|v| v.is_finite()))
    }

    fn blocks(&self) -> impl Iterator<Item = &Dense> {
        self.generator.iter().chain([&self.head_s, &self.head_t])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.generator
            .iter_mut()
            .chain([&mut self.head_s, &mut self.head_t])
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().map(Dense::len).sum()
    }

    /// Parameters in checkpoint order: generator layers (weights then bias),
    /// then the source head, then the target head.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().flat_map(|b| b.values().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape {
                expected: self.parameter_count(),
                got: values.len(),
            });
        }
        for (dst, src) in self.blocks_mut().flat_map(|b| b.values_mut()).zip(values) {
            *dst = *src;
        }
        Ok(())
    }

    /// Half-open ranges of the generator, source head and target head inside
    /// [`Model::to_flat`].
    pub fn flat_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let g: usize = self.generator.iter().map(Dense::len).sum();
        let s = self.head_s.len();
        let t = self.head_t.len();
        [0..g, g..g + s, g + s..g + s + t]
    }

    pub fn zero_grad_like(&self) -> Gradients {
        Gradients {
            generator: Some(self.generator.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect()),
            head_s: Some(Dense::zeros(self.head_s.fan_in, self.head_s.fan_out)),
            head_t: Some(Dense::zeros(self.head_t.fan_in, self.head_t.fan_out)),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient blocks; a `None` block is not touched by [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub generator: Option<Vec<Dense>>,
    pub head_s: Option<Dense>,
    pub head_t: Option<Dense>,
}

impl Gradients {
    /// Flattened in checkpoint order, zero-filled for absent blocks.
    pub fn to_flat(&self, model: &Model) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.parameter_count());
        match &self.generator {
            Some(g) => g.iter().for_each(|l| out.extend(l.values())),
            None => out.extend(model.generator.iter().flat_map(|l| std::iter::repeat_n(0.0, l.len()))),
        }
        for (block, shape) in [(&self.head_s, &model.head_s), (&self.head_t, &model.head_t)] {
            match block {
                Some(b) => out.extend(b.values()),
                None => out.extend(std::iter::repeat_n(0.0, shape.len())),
            }
        }
        out
    }

    fn present(&self) -> impl Iterator<Item = &Dense> {
        self.generator
            .iter()
            .flatten()
            .chain(self.head_s.iter())
            .chain(self.head_t.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.present().all(|b| b.values().all(|v| v.is_finite()))
    }

    fn scale(&mut self, s: f64) {
        for g in self.generator.iter_mut().flatten() {
            g.scale(s);
        }
        for h in self.head_s.iter_mut().chain(self.head_t.iter_mut()) {
            h.scale(s);
        }
    }
}

/// Supervision target of a cross-entropy term.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("{what} is not a probability distribution")));
    }
    Ok(())
}

pub fn cross_entropy(pred: &[f64], target: Target<'_>) -> Result<f64> {
    check_distribution(pred, "prediction")?;
    match target {
        Target::Hard(y) => {
            let p = pred
                .get(y)
                .ok_or_else(|| Error::param(format!("class {y} out of range")))?;
            Ok(-p.max(PROB_FLOOR).ln())
        }
        Target::Soft(q) => {
            if q.len() != pred.len() {
                return Err(Error::Shape {
                    expected: pred.len(),
                    got: q.len(),
                });
            }
            check_distribution(q, "soft target")?;
            Ok(soft_ce(pred, q))
        }
    }
}

fn hard_ce(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

fn soft_ce(p: &[f64], q: &[f64]) -> f64 {
    -q.iter().zip(p).map(|(qi, pi)| qi * pi.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// `dCE/dlogits` for a softmax prediction `p` against hard label `y`.
fn hard_delta(p: &[f64], y: usize) -> Vec<f64> {
    let mut d = p.to_vec();
    d[y] -= 1.0;
    d
}

fn check_batch_labels(labels: impl Iterator<Item = usize>, k: usize) -> Result<()> {
    for y in labels {
        if y >= k {
            return Err(Error::param(format!("label {y} out of range for {k} classes")));
        }
    }
    Ok(())
}

/// Weak and strong views of the instance at batch position `position`.
pub fn consistency_views(x: &[f64], aug: &AugmentSpec, position: usize) -> (Vec<f64>, Vec<f64>) {
    let seed = derive_seed(aug.seed, &[position as u64]);
    (
        augment(x, aug, Strength::Weak, derive_seed(seed, &[1])),
        augment(x, aug, Strength::Strong, derive_seed(seed, &[2])),
    )
}

/// Supervised target-head loss with weak/strong consistency.
///
/// For each instance the weak view's prediction is a constant soft target for
/// the strong view's prediction. Only the target head receives gradient.
/// Augmentation draws are seeded per instance from `aug.seed` and the
/// instance position, so the loss is a deterministic function of the model.
pub fn loss_grad_target(
    model: &Model,
    batch: &[(&[f64], usize)],
    aug: &AugmentSpec,
    consistency_weight: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    aug.validate()?;
    check_batch_labels(batch.iter().map(|b| b.1), model.num_classes())?;
    let head = &model.head_t;
    let mut grad = Dense::zeros(head.fan_in, head.fan_out);
    let mut loss = 0.0;

    for (i, &(x, y)) in batch.iter().enumerate() {
        model.check_width(x)?;
        let z = model.features(x)?;
        let p = model.predict_from_features(Head::Target, &z);
        loss += hard_ce(&p, y);
        head.backward(&z, &hard_delta(&p, y), &mut grad);

        if consistency_weight != 0.0 {
            let (x1, x2) = consistency_views(x, aug, i);
            let q = model.predict(Head::Target, &x1)?;
            let z2 = model.features(&x2)?;
            let p2 = model.predict_from_features(Head::Target, &z2);
            loss += consistency_weight * soft_ce(&p2, &q);
            let delta: Vec<f64> = p2
                .iter()
                .zip(&q)
                .map(|(a, b)| consistency_weight * (a - b))
                .collect();
            head.backward(&z2, &delta, &mut grad);
        }
    }

    let n = batch.len() as f64;
    let mut grads = Gradients {
        generator: None,
        head_s: None,
        head_t: Some(grad),
    };
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Centroid pull applied to a source representation:
/// `(1 - eta) * G(x) + eta * centroid`, with the centroid held constant.
#[derive(Debug, Clone, Copy)]
pub struct Disturbance<'a> {
    pub eta: f64,
    pub centroid: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct SourceSample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub disturbance: Option<Disturbance<'a>>,
}

/// Source objective: both heads classify the (possibly disturbed) source
/// representation. The generator and source head receive gradient; the
/// target head is held fixed.
pub fn loss_grad_source(model: &Model, batch: &[SourceSample<'_>]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    check_batch_labels(batch.iter().map(|b| b.label), model.num_classes())?;
    let mut grads = model.zero_grad_like();
    grads.head_t = None;
    let mut loss = 0.0;

    for s in batch {
        model.check_width(s.x)?;
        let trace = model.trace(s.x);
        let (h, keep) = match s.disturbance {
            Some(Disturbance { eta, centroid }) => {
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::param(format!("eta {eta} outside [0, 1]")));
                }
                if centroid.len() != model.feature_dim() {
                    return Err(Error::Shape {
                        expected: model.feature_dim(),
                        got: centroid.len(),
                    });
                }
                (crate::nic::correct_feature(trace.feature(), centroid, eta)?, 1.0 - eta)
            }
            None => (trace.feature().to_vec(), 1.0),
        };

        let ps = model.predict_from_features(Head::Source, &h);
        let pt = model.predict_from_features(Head::Target, &h);
        loss += hard_ce(&ps, s.label) + hard_ce(&pt, s.label);

        let ds = hard_delta(&ps, s.label);
        let dt = hard_delta(&pt, s.label);
        let dh_s = model.head_s.backward(&h, &ds, grads.head_s.as_mut().unwrap());
        let mut scratch = Dense::zeros(model.head_t.fan_in, model.head_t.fan_out);
        let dh_t = model.head_t.backward(&h, &dt, &mut scratch);

        if keep != 0.0 {
            let dz: Vec<f64> = dh_s.iter().zip(&dh_t).map(|(a, b)| keep * (a + b)).collect();
            model.backward_generator(&trace, &dz, grads.generator.as_mut().unwrap());
        }
    }

    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Plain cross-entropy on the source head, used during warm-up.
pub fn loss_grad_source_only(model: &Model, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    check_batch_labels(batch.iter().map(|b| b.1), model.num_classes())?;
    let mut grads = model.zero_grad_like();
    grads.head_t = None;
    let mut loss = 0.0;
    for &(x, y) in batch {
        model.check_width(x)?;
        let trace = model.trace(x);
        let p = model.predict_from_features(Head::Source, trace.feature());
        loss += hard_ce(&p, y);
        let dz = model
            .head_s
            .backward(trace.feature(), &hard_delta(&p, y), grads.head_s.as_mut().unwrap());
        model.backward_generator(&trace, &dz, grads.generator.as_mut().unwrap());
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Per-block momentum buffers, created lazily on first use.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    generator: Option<Vec<Dense>>,
    head_s: Option<Dense>,
    head_t: Option<Dense>,
}

fn momentum_update(param: &mut Dense, grad: &Dense, velocity: &mut Dense, lr: f64, momentum: f64) {
    for ((p, g), v) in param.values_mut().zip(grad.values()).zip(velocity.values_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD (`v <- mu v + g; w <- w - lr v`) on the blocks present in
/// `grads`. On non-finite gradients nothing is modified.
pub fn sgd_step(
    model: &Model,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<Model> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::param("learning rate must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::param("momentum must lie in [0, 1)"));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    let mut next = model.clone();
    if let Some(g) = &grads.generator {
        let vel = state
            .generator
            .get_or_insert_with(|| g.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect());
        for ((p, gl), v) in next.generator.iter_mut().zip(g).zip(vel.iter_mut()) {
            momentum_update(p, gl, v, lr, momentum);
        }
    }
    if let Some(g) = &grads.head_s {
        let v = state.head_s.get_or_insert_with(|| Dense::zeros(g.fan_in, g.fan_out));
        momentum_update(&mut next.head_s, g, v, lr, momentum);
    }
    if let Some(g) = &grads.head_t {
        let v = state.head_t.get_or_insert_with(|| Dense::zeros(g.fan_in, g.fan_out));
        momentum_update(&mut next.head_t, g, v, lr, momentum);
    }
    Ok(next)
}
