//! Bit-exact comparison of the library correction passes with the oracle.

use super::oracle::{self, OracleOutput, SourceArgs};
use super::random_instance;
use dualcan::nic::{nic_source, nic_target, ClusterModel, CorrectionRecord, NicOptions, RadiusMode};

pub fn options(inst: &super::Instance) -> NicOptions {
    NicOptions {
        separation_ratio: inst.p,
        eta: inst.eta,
        feature_correction: inst.feature_correction,
        label_correction: inst.label_correction,
        radius: inst.percentile.map_or(RadiusMode::Max, RadiusMode::Percentile),
    }
}

fn same_clusters(c: &ClusterModel, o: &OracleOutput) -> Result<(), String> {
    for k in 0..c.num_classes() {
        let lib = (!c.empty_mask[k]).then(|| c.centroids[k].clone());
        if lib != o.centroids[k] {
            return Err(format!("centroid {k}: {lib:?} vs {:?}", o.centroids[k]));
        }
        if c.radii[k].to_bits() != o.radii[k].to_bits() {
            return Err(format!("radius {k}: {} vs {}", c.radii[k], o.radii[k]));
        }
    }
    Ok(())
}

fn same_records(lib: &[CorrectionRecord], o: &OracleOutput) -> Result<(), String> {
    if lib.len() != o.records.len() {
        return Err(format!("{} records vs {}", lib.len(), o.records.len()));
    }
    for (a, b) in lib.iter().zip(&o.records) {
        let same = a.index == b.index
            && a.verdict.index() == b.verdict
            && a.assigned_cluster == b.k_star
            && a.distance.to_bits() == b.dist.to_bits()
            && a.radius.to_bits() == b.radius.to_bits()
            && a.corrected_label == b.label
            && a.corrected_feature == b.feature
            && a.eta_used.to_bits() == b.eta.to_bits();
        if !same {
            return Err(format!("record mismatch:\n  lib    {a:?}\n  oracle {b:?}"));
        }
    }
    Ok(())
}

/// Compares one random source and target pass against the oracle.
pub fn check(seed: u64) -> Result<(), String> {
    let inst = random_instance(seed);
    let opts = options(&inst);
    let ds = &inst.dataset;
    let observed = ds.observed_labels().unwrap();

    let lib = nic_source(ds, &inst.model, &opts).map_err(|e| e.to_string())?;
    let args = SourceArgs {
        p: inst.p,
        eta: inst.eta,
        feature_correction: inst.feature_correction,
        label_correction: inst.label_correction,
        percentile: inst.percentile,
    };
    let o = oracle::source(&inst.model, ds.features(), observed, &args);
    let trusted: Vec<bool> = (0..ds.len()).map(|i| lib.split.trusted.contains(&i)).collect();
    if trusted != o.trusted || lib.split.gamma.to_bits() != o.gamma.to_bits() {
        return Err("source trust split differs".into());
    }
    same_clusters(&lib.clusters, &o)?;
    same_records(&lib.records, &o)?;
    let labels: Vec<usize> = lib.corrected.iter().map(|c| c.label).collect();
    let dist: Vec<_> = lib.corrected.iter().map(|c| c.disturbance).collect();
    if labels != o.labels || dist != o.disturbance {
        return Err("source corrected labels differ".into());
    }

    // reuse the observed labels as pseudo-labels for the target pass
    let t = nic_target(ds.features(), observed, &inst.model, &opts, None).map_err(|e| e.to_string())?;
    let ot = oracle::target(&inst.model, ds.features(), observed, inst.p, inst.percentile, None);
    same_clusters(&t.clusters, &ot)?;
    same_records(&t.records, &ot)?;
    if t.labels != ot.labels {
        return Err("target labels differ".into());
    }

    let ext = nic_target(ds.features(), observed, &inst.model, &opts, Some(&lib.clusters)).map_err(|e| e.to_string())?;
    let ext_o = oracle::target(
        &inst.model,
        ds.features(),
        observed,
        inst.p,
        inst.percentile,
        Some((o.centroids.clone(), o.radii.clone())),
    );
    same_records(&ext.records, &ext_o)?;
    if ext.labels != ext_o.labels {
        return Err("target labels with source clusters differ".into());
    }
    Ok(())
}
