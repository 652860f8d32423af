use super::*;
use crate::datagen::{Domain, NoiseFlags};
use crate::model::{init_model, Dense, ModelConfig};

fn clusters_of(points: &[[f64; 2]], labels: &[usize], k: usize) -> ClusterModel {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    build_clusters(&flat, 2, labels, k).unwrap()
}

#[test]
fn split_sorts_and_cuts() {
    let s = split_small_loss(&[0.5, 0.1, 0.9, 0.3], 0.5).unwrap();
    assert_eq!(s.trusted, vec![1, 3]);
    assert_eq!(s.untrusted, vec![0, 2]);
    assert_eq!(s.gamma, 0.3);
}

#[test]
fn split_uses_ceiling_of_n_p() {
    let losses: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
    assert_eq!(split_small_loss(&losses, 0.08).unwrap().trusted.len(), 8);
    assert_eq!(trusted_count(600, 0.08), 48);
    assert_eq!(trusted_count(10, 0.01), 1);
    assert_eq!(trusted_count(7, 0.5), 4);
}

#[test]
fn split_ties_go_to_lower_indices() {
    let s = split_small_loss(&[1.0; 10], 0.3).unwrap();
    assert_eq!(s.trusted, vec![0, 1, 2]);
    assert_eq!(s.gamma, 1.0);
}

#[test]
fn split_rejects_bad_input() {
    assert!(matches!(split_small_loss(&[0.1, f64::NAN], 0.5), Err(Error::Numeric(_))));
    assert!(matches!(split_small_loss(&[0.1], 0.5), Err(Error::Parameter(_))));
    assert!(matches!(split_small_loss(&[0.1, 0.2], 1.0), Err(Error::Parameter(_))));
}

#[test]
fn cluster_mean_and_radius() {
    let c = clusters_of(&[[0.0, 0.0], [2.0, 0.0]], &[0, 0], 1);
    assert_eq!(c.centroids[0], vec![1.0, 0.0]);
    assert_eq!(c.radii[0], 1.0);
    assert_eq!(c.members[0], vec![0, 1]);
}

#[test]
fn degenerate_clusters_have_zero_radius() {
    let c = clusters_of(&[[4.0, -1.0], [3.0, 3.0], [3.0, 3.0]], &[0, 1, 1], 3);
    assert_eq!(c.radii[0], 0.0);
    assert_eq!(c.centroids[1], vec![3.0, 3.0]);
    assert_eq!(c.radii[1], 0.0);
    assert!(c.empty_mask[2] && !c.empty_mask[0]);
    assert!(c.centroids[2].iter().all(|v| v.is_nan()));
}

#[test]
fn cluster_label_out_of_range() {
    assert!(matches!(build_clusters(&[0.0, 0.0], 2, &[3], 2), Err(Error::Parameter(_))));
}

#[test]
fn percentile_radius_is_opt_in() {
    let flat = [0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 14.0, 0.0];
    let max = build_clusters(&flat, 2, &[0; 5], 1).unwrap();
    let p = build_clusters_with(&flat, 2, &[0; 5], 1, RadiusMode::Percentile(80.0)).unwrap();
    // centroid at 4: distances 4, 3, 2, 1, 10
    assert_eq!(max.radii[0], 10.0);
    assert_eq!(p.radii[0], 4.0);
}

#[test]
fn nearest_cluster_rules() {
    let c = clusters_of(&[[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]], &[0, 1, 2], 3);
    assert_eq!(nearest_cluster(&[5.0, 5.0], &c).unwrap(), (2, 0.0));
    // equidistant from mu_0 and mu_1
    assert_eq!(nearest_cluster(&[1.0, -3.0], &c).unwrap().0, 0);

    let mut masked = c.clone();
    masked.centroids[1] = vec![0.0, 0.0];
    masked.empty_mask[1] = true;
    assert_eq!(nearest_cluster(&[0.1, 0.0], &masked).unwrap().0, 0);
    masked.empty_mask = vec![true; 3];
    assert!(matches!(nearest_cluster(&[0.0, 0.0], &masked), Err(Error::State(_))));
}

#[test]
fn identify_boundary_is_inclusive() {
    let c = clusters_of(&[[0.0, 0.0], [2.0, 0.0], [10.0, 0.0]], &[0, 0, 1], 2);
    // cluster 0: mu (1, 0), r = 1
    assert_eq!(identify(&[1.0, 1.0], 0, &c).unwrap(), (NoiseVerdict::Clean, 0, 1.0));
    assert_eq!(identify(&[1.0, 1.0], 1, &c).unwrap(), (NoiseVerdict::LabelNoise, 0, 1.0));
    let eps = 1e-9;
    for label in 0..2 {
        assert_eq!(identify(&[1.0, 1.0 + eps], label, &c).unwrap().0, NoiseVerdict::FeatureNoise);
    }
}

#[test]
fn disturbance_endpoints() {
    let z = [0.0, 2.0];
    let mu = [2.0, 0.0];
    assert_eq!(correct_feature(&z, &mu, 0.0).unwrap(), z);
    assert_eq!(correct_feature(&z, &mu, 1.0).unwrap(), mu);
    assert_eq!(correct_feature(&z, &mu, 0.5).unwrap(), vec![1.0, 1.0]);
    assert!(matches!(correct_feature(&z, &mu, 1.5), Err(Error::Parameter(_))));
}

#[test]
fn eta_decays_linearly_to_zero() {
    assert_eq!(eta_schedule(0, 80, 0.5), 0.5);
    assert_eq!(eta_schedule(80, 80, 0.5), 0.0);
    assert_eq!(eta_schedule(40, 80, 0.5), 0.25);
    let etas: Vec<f64> = (0..=80).map(|e| eta_schedule(e, 80, 0.7)).collect();
    assert!(etas.windows(2).all(|w| w[1] <= w[0]));
}

/// Identity generator (2 -> 2 -> 2) with a hand-set source head.
fn identity_model(head: Dense) -> Model {
    let mut layer = Dense::zeros(2, 2);
    layer.weights = vec![1.0, 0.0, 0.0, 1.0];
    let mut g = init_model(&ModelConfig {
        input_dim: 2,
        hidden_dims: vec![],
        feature_dim: 2,
        num_classes: head.fan_out,
        init_scale: 1.0,
        seed: 0,
    })
    .unwrap();
    g.generator = vec![layer];
    g.head_s = head.clone();
    g.head_t = head;
    g
}

fn three_class_head() -> Dense {
    // logits = 4 * <z, direction_k>
    let mut h = Dense::zeros(2, 3);
    h.weights = vec![4.0, 0.0, 0.0, 4.0, -4.0, -4.0];
    h
}

fn labeled(points: &[[f64; 2]], labels: &[usize]) -> NoisyDataset {
    NoisyDataset::new(
        points.iter().flatten().copied().collect(),
        2,
        3,
        Some(labels.to_vec()),
        labels.to_vec(),
        vec![NoiseFlags::default(); labels.len()],
        Domain::Source,
    )
    .unwrap()
}

#[test]
fn source_pass_keeps_every_instance() {
    let points = [
        [1.0, 0.0],
        [1.2, 0.1],
        [0.0, 1.0],
        [0.1, 1.1],
        [-1.0, -1.0],
        [-1.1, -0.9],
        [1.1, 0.05],
        [0.05, 1.05],
        [-1.05, -1.0],
        [9.0, -9.0],
    ];
    let labels = [0, 0, 1, 1, 2, 2, 1, 1, 2, 1];
    let ds = labeled(&points, &labels);
    let model = identity_model(three_class_head());
    let opts = NicOptions {
        separation_ratio: 0.8,
        eta: 0.25,
        ..NicOptions::default()
    };
    let pass = nic_source(&ds, &model, &opts).unwrap();
    assert_eq!(pass.corrected.len(), ds.len());
    assert_eq!(pass.records.len(), pass.split.untrusted.len());
    assert_eq!(pass.split.trusted.len() + pass.split.untrusted.len(), ds.len());

    // instance 6 sits inside cluster 0 but is labeled 1
    let r6 = pass.records.iter().find(|r| r.index == 6).unwrap();
    assert_eq!(r6.verdict, NoiseVerdict::LabelNoise);
    assert_eq!(pass.corrected[6].label, 0);
    assert!(r6.corrected_feature.is_none());

    // instance 9 is far from everything
    let r9 = pass.records.iter().find(|r| r.index == 9).unwrap();
    assert_eq!(r9.verdict, NoiseVerdict::FeatureNoise);
    let mu = &pass.clusters.centroids[r9.assigned_cluster];
    let expect = correct_feature(&[9.0, -9.0], mu, 0.25).unwrap();
    assert_eq!(r9.corrected_feature.as_ref().unwrap(), &expect);
    assert_eq!(pass.corrected[9].disturbance, Some((r9.assigned_cluster, 0.25)));

    for &t in &pass.split.trusted {
        assert_eq!(pass.corrected[t].label, labels[t]);
        assert!(pass.corrected[t].disturbance.is_none());
    }
    let total: usize = pass.clusters.members.iter().map(Vec::len).sum();
    assert_eq!(total, ds.len());
}

#[test]
fn source_pass_respects_correction_switches() {
    let points = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [1.1, 0.0], [30.0, 30.0], [0.9, 0.1]];
    let labels = [0, 1, 2, 2, 1, 0];
    let ds = labeled(&points, &labels);
    let model = identity_model(three_class_head());
    let base = NicOptions {
        separation_ratio: 0.5,
        ..NicOptions::default()
    };
    let off = NicOptions {
        feature_correction: false,
        label_correction: false,
        ..base.clone()
    };
    let pass = nic_source(&ds, &model, &off).unwrap();
    for r in &pass.records {
        assert!(r.corrected_feature.is_none());
        assert_eq!(r.corrected_label, labels[r.index]);
    }
    let labels_only = nic_source(
        &ds,
        &model,
        &NicOptions {
            feature_correction: false,
            ..base
        },
    )
    .unwrap();
    assert!(labels_only.records.iter().all(|r| r.corrected_feature.is_none()));
}

#[test]
fn empty_class_is_seeded_by_lowest_loss_instance() {
    // class 2 only appears among high-loss instances
    let points = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0], [2.0, 0.0], [0.0, 2.0]];
    let labels = [0, 1, 0, 1, 2, 2];
    let ds = labeled(&points, &labels);
    let model = identity_model(three_class_head());
    let pass = nic_source(
        &ds,
        &model,
        &NicOptions {
            separation_ratio: 0.5,
            ..NicOptions::default()
        },
    )
    .unwrap();
    assert!(!pass.clusters.empty_mask[2]);
    let seed = pass.clusters.members[2][0];
    assert!(labels[seed] == 2);
    let other = if seed == 4 { 5 } else { 4 };
    assert!(pass.split.losses[seed] <= pass.split.losses[other]);
    assert_eq!(pass.clusters.radii[2], 0.0);
}

#[test]
fn source_pass_requires_labels() {
    let ds = NoisyDataset::new(vec![0.0; 4], 2, 3, None, vec![0, 1], vec![NoiseFlags::default(); 2], Domain::Target).unwrap();
    let model = identity_model(three_class_head());
    assert!(matches!(nic_source(&ds, &model, &NicOptions::default()), Err(Error::State(_))));
}

#[test]
fn target_pass_relabels_untrusted_to_nearest_cluster() {
    // target head agrees with the pseudo-labels of the first four points only
    let points = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [1.1, 0.0], [-1.0, -1.0], [0.0, 1.0]];
    let pseudo = [0, 1, 2, 0, 0, 2];
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let model = identity_model(three_class_head());
    let opts = NicOptions {
        separation_ratio: 0.6,
        ..NicOptions::default()
    };
    let pass = nic_target(&flat, &pseudo, &model, &opts, None).unwrap();
    for &t in &pass.split.trusted {
        assert_eq!(pass.labels[t], pseudo[t]);
    }
    // instance 4 sits exactly on the class-2 centroid
    assert_eq!(pass.labels[4], 2);
    assert_eq!(pass.labels[5], 1);
    assert!(pass.records.iter().all(|r| r.verdict == NoiseVerdict::LabelNoise));
    assert_eq!(pass.records.len(), pass.split.untrusted.len());
}

#[test]
fn nic_report_rows() {
    let rec = CorrectionRecord {
        index: 4,
        verdict: NoiseVerdict::FeatureNoise,
        assigned_cluster: 1,
        distance: 2.5,
        radius: 1.0,
        corrected_label: 1,
        corrected_feature: Some(vec![0.0]),
        eta_used: 0.5,
    };
    let mut out = Vec::new();
    write_nic_rows(&mut out, 3, "source", &[rec]).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "3,source,4,feature_noise,1,2.5,1,1,0.5\n");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn points() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n * 3),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn radius_covers_every_trusted_member((flat, labels) in points()) {
            let c = build_clusters(&flat, 3, &labels, 3).unwrap();
            for k in 0..3 {
                if c.empty_mask[k] { continue; }
                let dists: Vec<f64> = c.members[k]
                    .iter()
                    .map(|&i| euclidean(&flat[i * 3..i * 3 + 3], &c.centroids[k]))
                    .collect();
                prop_assert!(dists.iter().all(|d| *d <= c.radii[k]));
                prop_assert!(dists.iter().any(|d| *d == c.radii[k]));
            }
        }

        #[test]
        fn every_untrusted_instance_gets_one_verdict((flat, labels) in points(), p in 0.05f64..0.95) {
            prop_assume!(labels.len() >= 2);
            let losses: Vec<f64> = flat.chunks(3).map(|r| r[0].abs()).collect();
            let split = split_small_loss(&losses, p).unwrap();
            let tl: Vec<usize> = split.trusted.iter().map(|&i| labels[i]).collect();
            let tf: Vec<f64> = split.trusted.iter().flat_map(|&i| flat[i * 3..i * 3 + 3].to_vec()).collect();
            let c = build_clusters(&tf, 3, &tl, 3).unwrap();
            let mut counts = [0usize; 3];
            for &i in &split.untrusted {
                let (v, _, _) = identify(&flat[i * 3..i * 3 + 3], labels[i], &c).unwrap();
                counts[v.index()] += 1;
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), split.untrusted.len());
            for &t in &split.trusted { prop_assert!(losses[t] <= split.gamma); }
            for &u in &split.untrusted { prop_assert!(losses[u] >= split.gamma); }
        }

        #[test]
        fn disturbance_endpoints_hold(z in prop::collection::vec(-5.0f64..5.0, 4), mu in prop::collection::vec(-5.0f64..5.0, 4)) {
            prop_assert_eq!(correct_feature(&z, &mu, 0.0).unwrap(), z.clone());
            prop_assert_eq!(correct_feature(&z, &mu, 1.0).unwrap(), mu.clone());
        }
    }
}
