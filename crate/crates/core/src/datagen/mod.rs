//! Synthetic source/target domain pairs with controlled corruption.
//!
//! The source domain is a mixture of `K` isotropic Gaussian classes whose
//! centers sit evenly on a circle in the first two coordinates. The target
//! domain draws fresh samples from the same classes and pushes them through
//! a rotation (in the `(x0, x1)` plane) followed by a translation, so the
//! class structure is preserved while the marginal distribution moves.
//!
//! Corruption follows a symmetric noise model. A label flip replaces the
//! clean label with one of the other `K - 1` classes uniformly. A feature
//! corruption adds Gaussian noise and pins a fraction of the coordinates to
//! the largest magnitude seen in the dataset, which is the vector analogue of
//! blur plus salt-and-pepper on images.

mod format;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub use format::{load_dataset, read_dataset, save_dataset, write_csv, write_dataset, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_center_scale")]
    pub class_center_scale: f64,
    #[serde(default = "default_spread")]
    pub class_spread: f64,
    #[serde(default)]
    pub shift_rotation: f64,
    /// Translation applied after rotation. Empty means the zero vector.
    #[serde(default)]
    pub shift_translation: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_center_scale() -> f64 {
    3.0
}

fn default_spread() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::param("feature_dim must be at least 2"));
        }
        if self.samples_per_class < 1 {
            return Err(Error::param("samples_per_class must be at least 1"));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::param("class_center_scale must be positive"));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return Err(Error::param("class_spread must be non-negative"));
        }
        if !self.shift_rotation.is_finite() {
            return Err(Error::param("shift_rotation must be finite"));
        }
        if !self.shift_translation.is_empty() && self.shift_translation.len() != self.feature_dim {
            return Err(Error::param(format!(
                "shift_translation has length {}, feature_dim is {}",
                self.shift_translation.len(),
                self.feature_dim
            )));
        }
        if self.shift_translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::param("shift_translation must be finite"));
        }
        Ok(())
    }

    /// Center of class `k` in the source domain.
    pub fn class_center(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.num_classes as f64;
        let mut c = vec![0.0; self.feature_dim];
        c[0] = self.class_center_scale * angle.cos();
        c[1] = self.class_center_scale * angle.sin();
        c
    }

    /// Maps a source-domain point to its target-domain counterpart.
    pub fn shift(&self, x: &[f64]) -> Vec<f64> {
        let (sin, cos) = self.shift_rotation.sin_cos();
        let mut y = x.to_vec();
        y[0] = cos * x[0] - sin * x[1];
        y[1] = sin * x[0] + cos * x[1];
        for (yi, ti) in y.iter_mut().zip(&self.shift_translation) {
            *yi += ti;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    LabelOnly,
    FeatureOnly,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Corruption level. In `[0, 1]` for single-channel kinds; `Mixed` accepts
    /// `[0, 2]` and fires each channel with probability `p_noise / 2`.
    pub p_noise: f64,
    pub kind: NoiseKind,
    #[serde(default = "default_feature_sigma")]
    pub feature_noise_sigma: f64,
    #[serde(default = "default_mask_fraction")]
    pub feature_mask_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature_sigma() -> f64 {
    1.0
}

fn default_mask_fraction() -> f64 {
    0.5
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            p_noise: 0.0,
            kind: NoiseKind::Mixed,
            feature_noise_sigma: default_feature_sigma(),
            feature_mask_fraction: default_mask_fraction(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max = match self.kind {
            NoiseKind::Mixed => 2.0,
            _ => 1.0,
        };
        if !(0.0..=max).contains(&self.p_noise) {
            return Err(Error::param(format!(
                "p_noise {} outside [0, {max}] for {:?}",
                self.p_noise, self.kind
            )));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::param("feature_noise_sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.feature_mask_fraction) {
            return Err(Error::param("feature_mask_fraction outside [0, 1]"));
        }
        Ok(())
    }

    /// Per-instance firing probabilities of the (label, feature) channels.
    pub fn channel_rates(&self) -> (f64, f64) {
        match self.kind {
            NoiseKind::LabelOnly => (self.p_noise, 0.0),
            NoiseKind::FeatureOnly => (0.0, self.p_noise),
            NoiseKind::Mixed => (self.p_noise / 2.0, self.p_noise / 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseFlags {
    pub label_corrupted: bool,
    pub feature_corrupted: bool,
}

/// Read-only view of the hidden ground truth of a dataset.
///
/// Only evaluation code should reach for this; training and noise correction
/// work from features and observed labels alone.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub clean_labels: &'a [usize],
    pub noise_flags: &'a [NoiseFlags],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    features: Vec<f64>,
    dim: usize,
    num_classes: usize,
    observed_labels: Option<Vec<usize>>,
    clean_labels: Vec<usize>,
    noise_flags: Vec<NoiseFlags>,
    domain: Domain,
}

impl NoisyDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        num_classes: usize,
        observed_labels: Option<Vec<usize>>,
        clean_labels: Vec<usize>,
        noise_flags: Vec<NoiseFlags>,
        domain: Domain,
    ) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::param("feature buffer is not a whole number of rows"));
        }
        let n = features.len() / dim;
        if clean_labels.len() != n || noise_flags.len() != n {
            return Err(Error::param("label/flag length does not match row count"));
        }
        if num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        if clean_labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::param("clean label out of range"));
        }
        if let Some(obs) = &observed_labels {
            if obs.len() != n {
                return Err(Error::param("observed label length does not match row count"));
            }
            for i in 0..n {
                if obs[i] >= num_classes {
                    return Err(Error::param(format!("observed label out of range at {i}")));
                }
                if (obs[i] != clean_labels[i]) != noise_flags[i].label_corrupted {
                    return Err(Error::param(format!("label flag inconsistent at {i}")));
                }
            }
        } else if noise_flags.iter().any(|f| f.label_corrupted) {
            return Err(Error::param("unlabeled dataset cannot carry label corruption"));
        }
        Ok(NoisyDataset {
            features,
            dim,
            num_classes,
            observed_labels,
            clean_labels,
            noise_flags,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Row-major `N x d` feature buffer.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    pub fn observed_labels(&self) -> Option<&[usize]> {
        self.observed_labels.as_deref()
    }

    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            clean_labels: &self.clean_labels,
            noise_flags: &self.noise_flags,
        }
    }

    /// Same dataset with rows reordered by `perm` (row `i` of the result is
    /// row `perm[i]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::param("not a permutation of the row indices"));
        }
        let mut features = Vec::with_capacity(self.features.len());
        for &p in perm {
            features.extend_from_slice(self.row(p));
        }
        Ok(NoisyDataset {
            features,
            dim: self.dim,
            num_classes: self.num_classes,
            observed_labels: self
                .observed_labels
                .as_ref()
                .map(|obs| perm.iter().map(|&p| obs[p]).collect()),
            clean_labels: perm.iter().map(|&p| self.clean_labels[p]).collect(),
            noise_flags: perm.iter().map(|&p| self.noise_flags[p]).collect(),
            domain: self.domain,
        })
    }
}

/// Draws a labeled source domain and an unlabeled, shifted target domain.
pub fn make_domain_pair(spec: &DomainSpec) -> Result<(NoisyDataset, NoisyDataset)> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let k = spec.num_classes;
    let d = spec.feature_dim;
    let n = k * spec.samples_per_class;

    let mut draw = |shifted: bool| {
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for class in 0..k {
            let center = spec.class_center(class);
            for _ in 0..spec.samples_per_class {
                let x: Vec<f64> = center
                    .iter()
                    .map(|c| c + spec.class_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if shifted {
                    features.extend(spec.shift(&x));
                } else {
                    features.extend(x);
                }
                labels.push(class);
            }
        }
        (features, labels)
    };

    let (src_x, src_y) = draw(false);
    let (tgt_x, tgt_y) = draw(true);
    let source = NoisyDataset {
        features: src_x,
        dim: d,
        num_classes: k,
        observed_labels: Some(src_y.clone()),
        clean_labels: src_y,
        noise_flags: vec![NoiseFlags::default(); n],
        domain: Domain::Source,
    };
    let target = NoisyDataset {
        features: tgt_x,
        dim: d,
        num_classes: k,
        observed_labels: None,
        clean_labels: tgt_y,
        noise_flags: vec![NoiseFlags::default(); n],
        domain: Domain::Target,
    };
    Ok((source, target))
}

/// Applies `noise` to a copy of `dataset`.
///
/// Flags accumulate across repeated calls. Label flips always draw from the
/// classes other than the clean label, so a flagged label never equals it.
pub fn corrupt(dataset: &NoisyDataset, noise: &NoiseSpec) -> Result<NoisyDataset> {
    noise.validate()?;
    let (label_rate, feature_rate) = noise.channel_rates();
    if label_rate > 0.0 && dataset.observed_labels.is_none() {
        return Err(Error::state("label corruption requested on an unlabeled dataset"));
    }

    let mut out = dataset.clone();
    let mut rng = seeded(noise.seed);
    let d = dataset.dim;
    let k = dataset.num_classes;
    let extreme = dataset.features.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let masked = (noise.feature_mask_fraction * d as f64).round() as usize;

    for i in 0..dataset.len() {
        let flip_label = rng.random::<f64>() < label_rate;
        let hit_feature = rng.random::<f64>() < feature_rate;

        if flip_label {
            let clean = out.clean_labels[i];
            let mut wrong = rng.random_range(0..k - 1);
            if wrong >= clean {
                wrong += 1;
            }
            if let Some(obs) = out.observed_labels.as_mut() {
                obs[i] = wrong;
            }
            out.noise_flags[i].label_corrupted = true;
        }

        if hit_feature {
            let row = &mut out.features[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v += noise.feature_noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            for j in index::sample(&mut rng, d, masked) {
                row[j] = if rng.random::<bool>() { extreme } else { -extreme };
            }
            out.noise_flags[i].feature_corrupted = true;
        }
    }
    Ok(out)
}
