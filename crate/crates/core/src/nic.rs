//! Noise identification and correction.
//!
//! One pass over a domain:
//!
//! 1. score every instance by the cross-entropy of its head against its
//!    (observed or pseudo) label and trust the smallest `ceil(N p)` losses;
//! 2. build one cluster per class from the trusted generator features
//!    (centroid = mean, radius = farthest trusted member);
//! 3. route every untrusted instance to its nearest non-empty cluster and
//!    classify it as clean, feature noise (outside the radius) or label noise
//!    (inside the radius, label disagrees with the cluster);
//! 4. correct: feature noise is pulled toward the centroid in feature space,
//!    label noise takes the cluster's class. Nothing is discarded.
//!
//! Cluster statistics are frozen for the whole pass. Untrusted instances are
//! appended to the member lists for reporting only.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::NoisyDataset;
use crate::error::{Error, Result};
use crate::model::{Head, Model, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct TrustSplit {
    /// Ascending instance indices.
    pub trusted: Vec<usize>,
    /// Ascending instance indices.
    pub untrusted: Vec<usize>,
    pub gamma: f64,
    pub losses: Vec<f64>,
}

/// Number of trusted instances for `n` losses at separation ratio `p`.
pub fn trusted_count(n: usize, p: f64) -> usize {
    // guard against 0.08 * 600 = 48.000000000000007 style round-up
    let raw = (n as f64 * p - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Small-loss split: the `ceil(N p)` smallest losses are trusted, ties broken
/// by lower index. `gamma` is the largest trusted loss.
pub fn split_small_loss(losses: &[f64], p: f64) -> Result<TrustSplit> {
    if losses.len() < 2 {
        return Err(Error::param("need at least two losses to split"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("separation ratio {p} outside (0, 1)")));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::numeric(format!("non-finite loss at index {i}")));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let cut = trusted_count(losses.len(), p);
    let gamma = losses[order[cut - 1]];
    let mut trusted = order[..cut].to_vec();
    let mut untrusted = order[cut..].to_vec();
    trusted.sort_unstable();
    untrusted.sort_unstable();
    Ok(TrustSplit {
        trusted,
        untrusted,
        gamma,
        losses: losses.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// Distance of the farthest trusted member.
    #[default]
    Max,
    /// Nearest-rank percentile (in `(0, 100]`) of member distances.
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `K` centroids of width `m`; empty clusters hold NaN.
    pub centroids: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    pub members: Vec<Vec<usize>>,
    pub empty_mask: Vec<bool>,
}

impl ClusterModel {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn non_empty(&self) -> usize {
        self.empty_mask.iter().filter(|e| !**e).count()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Clusters over row-major `features` (`n x dim`) grouped by `labels`.
/// Member lists hold row positions.
pub fn build_clusters(features: &[f64], dim: usize, labels: &[usize], k: usize) -> Result<ClusterModel> {
    build_clusters_with(features, dim, labels, k, RadiusMode::Max)
}

pub fn build_clusters_with(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    k: usize,
    radius: RadiusMode,
) -> Result<ClusterModel> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::param("feature buffer does not match label count"));
    }
    if labels.is_empty() {
        return Err(Error::param("cannot cluster zero instances"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::param(format!("label {y} out of range for {k} classes")));
    }
    if let RadiusMode::Percentile(q) = radius {
        if !(q > 0.0 && q <= 100.0) {
            return Err(Error::param(format!("radius percentile {q} outside (0, 100]")));
        }
    }

    let mut members = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    let mut empty_mask = Vec::with_capacity(k);
    for idx in &members {
        if idx.is_empty() {
            centroids.push(vec![f64::NAN; dim]);
            radii.push(0.0);
            empty_mask.push(true);
            continue;
        }
        let mut mu = vec![0.0; dim];
        for &i in idx {
            for (m, v) in mu.iter_mut().zip(row(i)) {
                *m += v;
            }
        }
        let count = idx.len() as f64;
        mu.iter_mut().for_each(|m| *m /= count);

        let mut dists: Vec<f64> = idx.iter().map(|&i| euclidean(row(i), &mu)).collect();
        let r = match radius {
            RadiusMode::Max => dists.iter().copied().fold(0.0, f64::max),
            RadiusMode::Percentile(q) => {
                dists.sort_by(f64::total_cmp);
                let rank = ((q / 100.0) * dists.len() as f64).ceil().max(1.0) as usize;
                dists[rank - 1]
            }
        };
        centroids.push(mu);
        radii.push(r);
        empty_mask.push(false);
    }
    Ok(ClusterModel {
        centroids,
        radii,
        members,
        empty_mask,
    })
}

/// Nearest non-empty centroid, ties to the smallest class id.
pub fn nearest_cluster(z: &[f64], clusters: &ClusterModel) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, mu) in clusters.centroids.iter().enumerate() {
        if clusters.empty_mask[k] {
            continue;
        }
        let d = euclidean(z, mu);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.ok_or_else(|| Error::state("every cluster is empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseVerdict {
    Clean,
    FeatureNoise,
    LabelNoise,
}

impl NoiseVerdict {
    pub const ALL: [NoiseVerdict; 3] = [NoiseVerdict::Clean, NoiseVerdict::FeatureNoise, NoiseVerdict::LabelNoise];

    pub fn index(self) -> usize {
        match self {
            NoiseVerdict::Clean => 0,
            NoiseVerdict::FeatureNoise => 1,
            NoiseVerdict::LabelNoise => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseVerdict::Clean => "clean",
            NoiseVerdict::FeatureNoise => "feature_noise",
            NoiseVerdict::LabelNoise => "label_noise",
        }
    }
}

/// Three-way rule: outside the nearest radius is feature noise; inside with a
/// disagreeing label is label noise; anything else is clean. The radius
/// boundary counts as inside.
pub fn identify(z: &[f64], observed_label: usize, clusters: &ClusterModel) -> Result<(NoiseVerdict, usize, f64)> {
    let (k, dist) = nearest_cluster(z, clusters)?;
    let verdict = if dist > clusters.radii[k] {
        NoiseVerdict::FeatureNoise
    } else if observed_label != k {
        NoiseVerdict::LabelNoise
    } else {
        NoiseVerdict::Clean
    };
    Ok((verdict, k, dist))
}

/// `(1 - eta) z + eta mu`.
pub fn correct_feature(z: &[f64], mu: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta {eta} outside [0, 1]")));
    }
    if z.len() != mu.len() {
        return Err(Error::Shape {
            expected: z.len(),
            got: mu.len(),
        });
    }
    Ok(z.iter().zip(mu).map(|(a, b)| (1.0 - eta) * a + eta * b).collect())
}

/// Linear decay from `eta0` at epoch 0 to exactly zero at `total_epochs`.
pub fn eta_schedule(epoch: usize, total_epochs: usize, eta0: f64) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return 0.0;
    }
    eta0 * (1.0 - epoch as f64 / total_epochs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRecord {
    pub index: usize,
    pub verdict: NoiseVerdict,
    pub assigned_cluster: usize,
    pub distance: f64,
    /// Radius of the assigned cluster, kept for reporting.
    pub radius: f64,
    pub corrected_label: usize,
    pub corrected_feature: Option<Vec<f64>>,
    pub eta_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicOptions {
    pub separation_ratio: f64,
    pub eta: f64,
    pub feature_correction: bool,
    pub label_correction: bool,
    pub radius: RadiusMode,
}

impl Default for NicOptions {
    fn default() -> Self {
        NicOptions {
            separation_ratio: 0.08,
            eta: 0.5,
            feature_correction: true,
            label_correction: true,
            radius: RadiusMode::Max,
        }
    }
}

/// Corrected view of one source instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedInstance {
    pub label: usize,
    /// Assigned cluster and weight when the representation is disturbed.
    pub disturbance: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct SourcePass {
    pub corrected: Vec<CorrectedInstance>,
    /// One record per untrusted instance, ascending index.
    pub records: Vec<CorrectionRecord>,
    pub clusters: ClusterModel,
    pub split: TrustSplit,
    /// Generator features of every instance (`N x m`, row-major).
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TargetPass {
    pub labels: Vec<usize>,
    pub records: Vec<CorrectionRecord>,
    pub clusters: ClusterModel,
    pub split: TrustSplit,
    pub features: Vec<f64>,
}

/// Per-instance cross-entropy of `head` against `labels`.
pub fn head_losses(model: &Model, head: Head, features: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let m = model.feature_dim();
    let k = model.num_classes();
    features
        .chunks_exact(m)
        .zip(labels)
        .map(|(z, &y)| {
            if y >= k {
                return Err(Error::param(format!("label {y} out of range for {k} classes")));
            }
            let p = model.predict_from_features(head, z);
            Ok(-p[y].max(PROB_FLOOR).ln())
        })
        .collect()
}

/// Trusted clusters for one domain, with the empty-class fallback: a class
/// with no trusted member is seeded by its lowest-loss instance, if any.
fn clusters_for(
    features: &[f64],
    m: usize,
    labels: &[usize],
    k: usize,
    split: &TrustSplit,
    radius: RadiusMode,
) -> Result<ClusterModel> {
    let mut rows = Vec::with_capacity(split.trusted.len() * m);
    let mut trusted_labels = Vec::with_capacity(split.trusted.len());
    for &i in &split.trusted {
        rows.extend_from_slice(&features[i * m..(i + 1) * m]);
        trusted_labels.push(labels[i]);
    }
    let mut clusters = build_clusters_with(&rows, m, &trusted_labels, k, radius)?;
    for members in clusters.members.iter_mut() {
        for pos in members.iter_mut() {
            *pos = split.trusted[*pos];
        }
    }

    for class in 0..k {
        if !clusters.empty_mask[class] {
            continue;
        }
        let seed = split
            .untrusted
            .iter()
            .copied()
            .filter(|&i| labels[i] == class)
            .min_by(|&a, &b| split.losses[a].total_cmp(&split.losses[b]).then(a.cmp(&b)));
        if let Some(i) = seed {
            clusters.centroids[class] = features[i * m..(i + 1) * m].to_vec();
            clusters.radii[class] = 0.0;
            clusters.members[class] = vec![i];
            clusters.empty_mask[class] = false;
        }
    }
    if clusters.non_empty() == 0 {
        return Err(Error::state("every cluster is empty"));
    }
    Ok(clusters)
}

fn check_model(model: &Model, dataset_dim: usize) -> Result<()> {
    if !model.is_finite() {
        return Err(Error::numeric("model has non-finite parameters"));
    }
    if model.input_dim() != dataset_dim {
        return Err(Error::Shape {
            expected: model.input_dim(),
            got: dataset_dim,
        });
    }
    Ok(())
}

/// One correction pass over a labeled source dataset.
pub fn nic_source(dataset: &NoisyDataset, model: &Model, opts: &NicOptions) -> Result<SourcePass> {
    let observed = dataset
        .observed_labels()
        .ok_or_else(|| Error::state("source correction needs observed labels"))?;
    check_model(model, dataset.dim())?;
    if !(0.0..=1.0).contains(&opts.eta) {
        return Err(Error::param(format!("eta {} outside [0, 1]", opts.eta)));
    }
    let m = model.feature_dim();
    let k = model.num_classes();
    let features = model.features_batch(dataset.features())?;
    let losses = head_losses(model, Head::Source, &features, observed)?;
    let split = split_small_loss(&losses, opts.separation_ratio)?;
    let mut clusters = clusters_for(&features, m, observed, k, &split, opts.radius)?;

    let mut corrected: Vec<CorrectedInstance> = observed
        .iter()
        .map(|&label| CorrectedInstance {
            label,
            disturbance: None,
        })
        .collect();
    let mut records = Vec::with_capacity(split.untrusted.len());
    let mut joined = Vec::with_capacity(split.untrusted.len());

    for &i in &split.untrusted {
        let z = &features[i * m..(i + 1) * m];
        let (verdict, star, dist) = identify(z, observed[i], &clusters)?;
        let mut record = CorrectionRecord {
            index: i,
            verdict,
            assigned_cluster: star,
            distance: dist,
            radius: clusters.radii[star],
            corrected_label: observed[i],
            corrected_feature: None,
            eta_used: 0.0,
        };
        match verdict {
            NoiseVerdict::FeatureNoise if opts.feature_correction => {
                record.corrected_feature = Some(correct_feature(z, &clusters.centroids[star], opts.eta)?);
                record.corrected_label = star;
                record.eta_used = opts.eta;
                corrected[i] = CorrectedInstance {
                    label: star,
                    disturbance: Some((star, opts.eta)),
                };
            }
            NoiseVerdict::LabelNoise if opts.label_correction => {
                record.corrected_label = star;
                corrected[i].label = star;
            }
            _ => {}
        }
        records.push(record);
        joined.push((star, i));
    }
    for (star, i) in joined {
        clusters.members[star].push(i);
    }

    Ok(SourcePass {
        corrected,
        records,
        clusters,
        split,
        features,
    })
}

/// One correction pass over pseudo-labeled target data.
///
/// Every untrusted pseudo-label is treated as label noise and replaced by its
/// nearest cluster's class. Clusters come from the trusted target instances
/// unless `external` is given.
pub fn nic_target(
    features_in: &[f64],
    pseudo_labels: &[usize],
    model: &Model,
    opts: &NicOptions,
    external: Option<&ClusterModel>,
) -> Result<TargetPass> {
    let d = model.input_dim();
    if features_in.len() != pseudo_labels.len() * d {
        return Err(Error::param("target features do not match pseudo-label count"));
    }
    check_model(model, d)?;
    let m = model.feature_dim();
    let k = model.num_classes();
    let features = model.features_batch(features_in)?;
    let losses = head_losses(model, Head::Target, &features, pseudo_labels)?;
    let split = split_small_loss(&losses, opts.separation_ratio)?;
    let mut clusters = match external {
        Some(c) => {
            if c.num_classes() != k || c.centroids.iter().any(|mu| mu.len() != m) {
                return Err(Error::param("external clusters do not match the model"));
            }
            let mut c = c.clone();
            c.members.iter_mut().for_each(Vec::clear);
            c
        }
        None => clusters_for(&features, m, pseudo_labels, k, &split, opts.radius)?,
    };

    let mut labels = pseudo_labels.to_vec();
    let mut records = Vec::with_capacity(split.untrusted.len());
    for &i in &split.untrusted {
        let z = &features[i * m..(i + 1) * m];
        let (star, dist) = nearest_cluster(z, &clusters)?;
        labels[i] = star;
        records.push(CorrectionRecord {
            index: i,
            verdict: NoiseVerdict::LabelNoise,
            assigned_cluster: star,
            distance: dist,
            radius: clusters.radii[star],
            corrected_label: star,
            corrected_feature: None,
            eta_used: 0.0,
        });
    }
    for r in &records {
        clusters.members[r.assigned_cluster].push(r.index);
    }
    Ok(TargetPass {
        labels,
        records,
        clusters,
        split,
        features,
    })
}

pub const NIC_REPORT_HEADER: &str = "epoch,domain,index,verdict,k_star,dist,radius,corrected_label,eta";

pub fn write_nic_rows<W: Write>(mut w: W, epoch: usize, domain: &str, records: &[CorrectionRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{epoch},{domain},{},{},{},{},{},{},{}",
            r.index,
            r.verdict.as_str(),
            r.assigned_cluster,
            r.distance,
            r.radius,
            r.corrected_label,
            r.eta_used
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
