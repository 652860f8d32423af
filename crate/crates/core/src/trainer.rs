//! The dual adaptation loop.
//!
//! Epochs `0..warmup_epochs` train the generator and source head on the
//! observed source labels. At the end of warm-up the target head is copied
//! from the source head. Every later epoch runs the source-to-target step
//! (pseudo-label, correct, train the target head) and then the
//! target-to-source step (correct the source, train generator and source
//! head with the target head fixed).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::NoisyDataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{
    init_model, loss_grad_source, loss_grad_source_only, loss_grad_target, sgd_step, AugmentSpec, Disturbance,
    Head, Model, ModelConfig, MomentumState, SourceSample,
};
use crate::nic::{eta_schedule, nic_source, nic_target, CorrectionRecord, NicOptions, NoiseVerdict, RadiusMode};
use crate::rng::{derive_seed, seeded};

const STREAM_INIT: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_ST: u64 = 3;
const STREAM_TS: u64 = 4;
const STREAM_AUG: u64 = 5;

/// Which correction components are active. Each `false` flag reproduces one
/// ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub feature_correction: bool,
    pub label_correction: bool,
    pub source_correction: bool,
    pub target_correction: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        feature_correction: true,
        label_correction: true,
        source_correction: true,
        target_correction: true,
    };
    pub const NONE: Ablation = Ablation {
        feature_correction: false,
        label_correction: false,
        source_correction: false,
        target_correction: false,
    };
}

/// Where target-side clusters come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetClusters {
    /// Trusted target instances and their pseudo-labels.
    #[default]
    Own,
    /// Trusted source instances of the current model.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub separation_ratio: f64,
    pub eta0: f64,
    pub consistency_weight: f64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub init_scale: f64,
    /// Weak/strong augmentation noise as multiples of the target feature scale.
    pub weak_aug: f64,
    pub strong_aug: f64,
    pub strong_mask_prob: f64,
    pub radius: RadiusMode,
    pub target_clusters: TargetClusters,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 90,
            warmup_epochs: 10,
            lr: 2e-3,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            batch_size: 32,
            separation_ratio: 0.08,
            eta0: 0.5,
            consistency_weight: 1.0,
            hidden_dims: vec![32, 16],
            feature_dim: 16,
            init_scale: 1.0,
            weak_aug: 0.05,
            strong_aug: 0.2,
            strong_mask_prob: 0.1,
            radius: RadiusMode::Max,
            target_clusters: TargetClusters::Own,
            ablation: Ablation::FULL,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return Err(Error::param("need 0 <= warmup_epochs < max_epochs"));
        }
        if !(self.separation_ratio > 0.0 && self.separation_ratio < 1.0) {
            return Err(Error::param("separation_ratio must lie in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return Err(Error::param("lr_decay_factor must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta0) {
            return Err(Error::param("eta0 must lie in [0, 1]"));
        }
        if !(self.consistency_weight >= 0.0 && self.consistency_weight.is_finite()) {
            return Err(Error::param("consistency_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes,
            init_scale: self.init_scale,
            seed: derive_seed(self.seed, &[STREAM_INIT]),
        }
    }

    /// Step decay by `lr_decay_factor` at every third of `max_epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let step = (self.max_epochs / 3).max(1);
        self.lr * self.lr_decay_factor.powi((epoch / step) as i32)
    }

    /// Disturbance weight for a dual-phase epoch; zero during warm-up.
    pub fn eta_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return 0.0;
        }
        eta_schedule(epoch - self.warmup_epochs, self.max_epochs - self.warmup_epochs, self.eta0)
    }

    /// Correction options for one pass at disturbance weight `eta`.
    pub fn nic_options(&self, eta: f64) -> NicOptions {
        NicOptions {
            separation_ratio: self.separation_ratio,
            eta,
            feature_correction: self.ablation.feature_correction,
            label_correction: self.ablation.label_correction,
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Dual,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub clean: usize,
    pub feature_noise: usize,
    pub label_noise: usize,
}

impl VerdictCounts {
    pub fn from_records(records: &[CorrectionRecord]) -> Self {
        let mut c = VerdictCounts::default();
        for r in records {
            match r.verdict {
                NoiseVerdict::Clean => c.clean += 1,
                NoiseVerdict::FeatureNoise => c.feature_noise += 1,
                NoiseVerdict::LabelNoise => c.label_noise += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.clean + self.feature_noise + self.label_noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub eta: f64,
    pub source_train_loss: f64,
    pub source_accuracy: f64,
    /// Target-head accuracy; during warm-up the source head stands in.
    pub target_accuracy: f64,
    /// Fraction of source labels used for training that differ from clean.
    pub residual_source_noise_ratio: f64,
    /// Fraction of source instances the correction pass flagged as noisy.
    pub detected_source_noise_ratio: f64,
    pub pseudo_label_error: f64,
    pub source_counts: VerdictCounts,
    pub target_counts: VerdictCounts,
}

/// Mutable optimizer state threaded through the steps.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub momentum: MomentumState,
}

/// Argmax of the source-head prediction, ties to the smallest class.
pub fn pseudo_label(model: &Model, features: &[f64]) -> Result<Vec<usize>> {
    let d = model.input_dim();
    if !features.len().is_multiple_of(d) {
        return Err(Error::Shape {
            expected: d,
            got: features.len() % d,
        });
    }
    features
        .chunks_exact(d)
        .map(|x| Ok(argmax(&model.predict(Head::Source, x)?)))
        .collect()
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order
}

fn check_loss(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numeric(format!("{what} loss became {loss} at epoch {epoch}")));
    }
    Ok(())
}

/// Root-mean-square deviation of all coordinates from their per-dimension mean.
pub fn feature_scale(ds: &NoisyDataset) -> f64 {
    let d = ds.dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for row in ds.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let var: f64 = ds
        .rows()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum::<f64>()
        / (n * d as f64);
    var.sqrt()
}

/// One warm-up epoch of plain cross-entropy on the source head.
pub fn warmup_epoch(
    model: Model,
    source: &NoisyDataset,
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainState,
) -> Result<(Model, f64)> {
    let labels = source
        .observed_labels()
        .ok_or_else(|| Error::state("warm-up needs observed source labels"))?;
    let lr = config.lr_at(epoch);
    let order = shuffled(source.len(), derive_seed(config.seed, &[STREAM_WARMUP, epoch as u64]));
    let mut model = model;
    let mut total = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (source.row(i), labels[i])).collect();
        let (loss, grads) = loss_grad_source_only(&model, &batch)?;
        check_loss(loss, "warm-up", epoch)?;
        model = sgd_step(&model, &grads, lr, config.momentum, &mut state.momentum)?;
        total += loss * chunk.len() as f64;
    }
    Ok((model, total / source.len() as f64))
}

/// Runs all warm-up epochs and initializes the target head from the source
/// head.
pub fn warmup(model: Model, source: &NoisyDataset, config: &TrainConfig, state: &mut TrainState) -> Result<Model> {
    let mut model = model;
    for epoch in 0..config.warmup_epochs {
        model = warmup_epoch(model, source, config, epoch, state)?.0;
    }
    model.head_t = model.head_s.clone();
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct StOutcome {
    pub raw_pseudo_labels: Vec<usize>,
    /// Labels the target head was trained on.
    pub labels: Vec<usize>,
    pub records: Vec<CorrectionRecord>,
    pub loss: f64,
}

/// Source-to-target step: pseudo-label, optionally correct, then one epoch of
/// target-head updates with consistency.
pub fn st_step(
    model: Model,
    target: &NoisyDataset,
    source: &NoisyDataset,
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainState,
) -> Result<(Model, StOutcome)> {
    let raw = pseudo_label(&model, target.features())?;
    let (labels, records) = if config.ablation.target_correction {
        let opts = config.nic_options(0.0);
        let external = match config.target_clusters {
            TargetClusters::Own => None,
            TargetClusters::Source => Some(nic_source(source, &model, &opts)?.clusters),
        };
        let pass = nic_target(target.features(), &raw, &model, &opts, external.as_ref())?;
        (pass.labels, pass.records)
    } else {
        (raw.clone(), Vec::new())
    };

    let lr = config.lr_at(epoch);
    let scale = feature_scale(target);
    let order = shuffled(target.len(), derive_seed(config.seed, &[STREAM_ST, epoch as u64]));
    let mut model = model;
    let mut total = 0.0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let aug = AugmentSpec {
            weak_sigma: config.weak_aug * scale,
            strong_sigma: config.strong_aug * scale,
            strong_mask_prob: config.strong_mask_prob,
            seed: derive_seed(config.seed, &[STREAM_AUG, epoch as u64, b as u64]),
        };
        let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (target.row(i), labels[i])).collect();
        let (loss, grads) = loss_grad_target(&model, &batch, &aug, config.consistency_weight)?;
        check_loss(loss, "target", epoch)?;
        model = sgd_step(&model, &grads, lr, config.momentum, &mut state.momentum)?;
        total += loss * chunk.len() as f64;
    }
    Ok((
        model,
        StOutcome {
            raw_pseudo_labels: raw,
            labels,
            records,
            loss: total / target.len() as f64,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TsOutcome {
    /// Labels the source side was trained on.
    pub labels: Vec<usize>,
    pub records: Vec<CorrectionRecord>,
    pub loss: f64,
}

/// Target-to-source step: optionally correct the source, then one epoch of
/// generator and source-head updates with the target head fixed.
pub fn ts_step(
    model: Model,
    source: &NoisyDataset,
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainState,
) -> Result<(Model, TsOutcome)> {
    let observed = source
        .observed_labels()
        .ok_or_else(|| Error::state("source step needs observed labels"))?;
    let eta = if config.ablation.feature_correction {
        config.eta_at(epoch)
    } else {
        0.0
    };
    let pass = if config.ablation.source_correction {
        Some(nic_source(source, &model, &config.nic_options(eta))?)
    } else {
        None
    };
    let labels: Vec<usize> = match &pass {
        Some(p) => p.corrected.iter().map(|c| c.label).collect(),
        None => observed.to_vec(),
    };

    let lr = config.lr_at(epoch);
    let order = shuffled(source.len(), derive_seed(config.seed, &[STREAM_TS, epoch as u64]));
    let mut model = model;
    let mut total = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<SourceSample> = chunk
            .iter()
            .map(|&i| SourceSample {
                x: source.row(i),
                label: labels[i],
                disturbance: pass.as_ref().and_then(|p| {
                    p.corrected[i].disturbance.map(|(k, eta)| Disturbance {
                        eta,
                        centroid: &p.clusters.centroids[k],
                    })
                }),
            })
            .collect();
        let (loss, grads) = loss_grad_source(&model, &batch)?;
        check_loss(loss, "source", epoch)?;
        model = sgd_step(&model, &grads, lr, config.momentum, &mut state.momentum)?;
        total += loss * chunk.len() as f64;
    }
    Ok((
        model,
        TsOutcome {
            labels,
            records: pass.map(|p| p.records).unwrap_or_default(),
            loss: total / source.len() as f64,
        },
    ))
}

/// Something observable happened during [`run_observed`].
pub enum TrainEvent<'a> {
    /// Warm-up finished; the target head has just been copied.
    WarmupDone { model: &'a Model },
    Epoch {
        metrics: &'a EpochMetrics,
        source_records: &'a [CorrectionRecord],
        target_records: &'a [CorrectionRecord],
    },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// A run that stopped on a numeric failure. Holds the metrics so far and the
/// last model whose parameters were all finite.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Model,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

fn check_pair(config: &TrainConfig, source: &NoisyDataset, target: &NoisyDataset) -> Result<()> {
    config.validate()?;
    if source.observed_labels().is_none() {
        return Err(Error::state("source dataset has no observed labels"));
    }
    if source.dim() != target.dim() || source.num_classes() != target.num_classes() {
        return Err(Error::param("source and target shapes differ"));
    }
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::param("each domain needs at least two instances"));
    }
    Ok(())
}

pub fn run(
    config: &TrainConfig,
    source: &NoisyDataset,
    target: &NoisyDataset,
) -> std::result::Result<RunOutput, Box<RunFailure>> {
    run_observed(config, source, target, |_| {})
}

pub fn run_observed(
    config: &TrainConfig,
    source: &NoisyDataset,
    target: &NoisyDataset,
    mut observer: impl FnMut(TrainEvent<'_>),
) -> std::result::Result<RunOutput, Box<RunFailure>> {
    let mut history = Vec::with_capacity(config.max_epochs);
    let init = check_pair(config, source, target)
        .and_then(|_| init_model(&config.model_config(source.dim(), source.num_classes())));
    let mut model = match init {
        Ok(m) => m,
        Err(error) => {
            let checkpoint = init_model(&ModelConfig::new(source.dim().max(1), source.num_classes().max(2)))
                .expect("fallback model config is valid");
            return Err(Box::new(RunFailure {
                error,
                history,
                checkpoint,
            }));
        }
    };
    let observed = source.observed_labels().unwrap();
    let mut state = TrainState::default();

    for epoch in 0..config.max_epochs {
        let last = model.clone();
        let fail = |error: Error, history: Vec<EpochMetrics>| {
            Box::new(RunFailure {
                error,
                history,
                checkpoint: last.clone(),
            })
        };

        if epoch < config.warmup_epochs {
            let (next, loss) = match warmup_epoch(model, source, config, epoch, &mut state) {
                Ok(r) => r,
                Err(e) => return Err(fail(e, history)),
            };
            model = next;
            if epoch + 1 == config.warmup_epochs {
                model.head_t = model.head_s.clone();
            }
            let metrics = match warmup_metrics(&model, config, epoch, loss, source, target, observed) {
                Ok(m) => m,
                Err(e) => return Err(fail(e, history)),
            };
            observer(TrainEvent::Epoch {
                metrics: &metrics,
                source_records: &[],
                target_records: &[],
            });
            history.push(metrics);
            if epoch + 1 == config.warmup_epochs {
                observer(TrainEvent::WarmupDone { model: &model });
            }
            continue;
        }
        if epoch == 0 {
            // no warm-up at all
            model.head_t = model.head_s.clone();
            observer(TrainEvent::WarmupDone { model: &model });
        }

        let step = st_step(model, target, source, config, epoch, &mut state).and_then(|(m, st)| {
            let (m, ts) = ts_step(m, source, config, epoch, &mut state)?;
            if !m.is_finite() {
                return Err(Error::numeric(format!("non-finite parameters after epoch {epoch}")));
            }
            Ok((m, st, ts))
        });
        let (next, st, ts) = match step {
            Ok(r) => r,
            Err(e) => return Err(fail(e, history)),
        };
        model = next;

        let metrics = (|| -> Result<EpochMetrics> {
            let gt_t = target.ground_truth();
            let gt_s = source.ground_truth();
            let detected = ts.records.iter().filter(|r| r.verdict != NoiseVerdict::Clean).count();
            Ok(EpochMetrics {
                epoch,
                phase: Phase::Dual,
                lr: config.lr_at(epoch),
                eta: if config.ablation.source_correction && config.ablation.feature_correction {
                    config.eta_at(epoch)
                } else {
                    0.0
                },
                source_train_loss: ts.loss,
                source_accuracy: eval::accuracy(&model, Head::Source, source.features(), gt_s.clean_labels)?,
                target_accuracy: eval::accuracy(&model, Head::Target, target.features(), gt_t.clean_labels)?,
                residual_source_noise_ratio: eval::label_error(&ts.labels, gt_s.clean_labels)?,
                detected_source_noise_ratio: detected as f64 / source.len() as f64,
                pseudo_label_error: eval::label_error(&st.labels, gt_t.clean_labels)?,
                source_counts: VerdictCounts::from_records(&ts.records),
                target_counts: VerdictCounts::from_records(&st.records),
            })
        })();
        let metrics = match metrics {
            Ok(m) => m,
            Err(e) => return Err(fail(e, history)),
        };
        observer(TrainEvent::Epoch {
            metrics: &metrics,
            source_records: &ts.records,
            target_records: &st.records,
        });
        history.push(metrics);
    }
    Ok(RunOutput { model, history })
}

fn warmup_metrics(
    model: &Model,
    config: &TrainConfig,
    epoch: usize,
    loss: f64,
    source: &NoisyDataset,
    target: &NoisyDataset,
    observed: &[usize],
) -> Result<EpochMetrics> {
    let gt_t = target.ground_truth();
    let gt_s = source.ground_truth();
    let pseudo = pseudo_label(model, target.features())?;
    Ok(EpochMetrics {
        epoch,
        phase: Phase::Warmup,
        lr: config.lr_at(epoch),
        eta: 0.0,
        source_train_loss: loss,
        source_accuracy: eval::accuracy(model, Head::Source, source.features(), gt_s.clean_labels)?,
        target_accuracy: eval::accuracy(model, Head::Source, target.features(), gt_t.clean_labels)?,
        residual_source_noise_ratio: eval::label_error(observed, gt_s.clean_labels)?,
        detected_source_noise_ratio: 0.0,
        pseudo_label_error: eval::label_error(&pseudo, gt_t.clean_labels)?,
        source_counts: VerdictCounts::default(),
        target_counts: VerdictCounts::default(),
    })
}

pub const METRICS_HEADER: &str = "epoch,phase,source_acc,target_acc,src_noise_ratio,pl_error,eta,lr,source_loss,detected_noise_ratio,src_clean,src_feature_noise,src_label_noise,tgt_relabeled";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            match m.phase {
                Phase::Warmup => "warmup",
                Phase::Dual => "dual",
            },
            m.source_accuracy,
            m.target_accuracy,
            m.residual_source_noise_ratio,
            m.pseudo_label_error,
            m.eta,
            m.lr,
            m.source_train_loss,
            m.detected_source_noise_ratio,
            m.source_counts.clean,
            m.source_counts.feature_noise,
            m.source_counts.label_noise,
            m.target_counts.total(),
        ));
    }
    out
}
