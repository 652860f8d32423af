//! Brute-force transcription of the correction algorithm, written without
//! reference to the library's implementation. Quadratic everywhere it can be.

use dualcan::model::{Head, Model};

pub const FLOOR: f64 = 1e-12;

/// Centroids (absent for empty classes) and radii.
pub type Clusters = (Vec<Option<Vec<f64>>>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub index: usize,
    /// 0 clean, 1 feature noise, 2 label noise.
    pub verdict: usize,
    pub k_star: usize,
    pub dist: f64,
    pub radius: f64,
    pub label: usize,
    pub feature: Option<Vec<f64>>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub trusted: Vec<bool>,
    pub gamma: f64,
    pub centroids: Vec<Option<Vec<f64>>>,
    pub radii: Vec<f64>,
    pub labels: Vec<usize>,
    pub disturbance: Vec<Option<(usize, f64)>>,
    pub records: Vec<OracleRecord>,
}

fn loss(model: &Model, head: Head, z: &[f64], y: usize) -> f64 {
    let p = model.predict_from_features(head, z);
    -(if p[y] > FLOOR { p[y] } else { FLOOR }).ln()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..a.len() {
        s += (a[c] - b[c]) * (a[c] - b[c]);
    }
    s.sqrt()
}

/// Trusted iff fewer than `ceil(N p)` instances come strictly before it in
/// (loss, index) order.
fn trust(losses: &[f64], p: f64) -> (Vec<bool>, f64) {
    let n = losses.len();
    let mut count = (n as f64 * p - 1e-9).ceil() as i64;
    if count < 1 {
        count = 1;
    }
    if count as usize > n {
        count = n as i64;
    }
    let mut trusted = vec![false; n];
    let mut gamma = f64::NEG_INFINITY;
    for i in 0..n {
        let mut before = 0;
        for j in 0..n {
            if losses[j] < losses[i] || (losses[j] == losses[i] && j < i) {
                before += 1;
            }
        }
        if before < count {
            trusted[i] = true;
            if losses[i] > gamma {
                gamma = losses[i];
            }
        }
    }
    (trusted, gamma)
}

fn clusters(
    z: &[Vec<f64>],
    labels: &[usize],
    losses: &[f64],
    trusted: &[bool],
    k: usize,
    percentile: Option<f64>,
) -> Clusters {
    let m = z[0].len();
    let mut centroids = Vec::new();
    let mut radii = Vec::new();
    for class in 0..k {
        let members: Vec<usize> = (0..z.len()).filter(|&i| trusted[i] && labels[i] == class).collect();
        if members.is_empty() {
            // lowest-loss untrusted instance of this class, first index on ties
            let mut seed: Option<usize> = None;
            for i in 0..z.len() {
                if !trusted[i] && labels[i] == class {
                    match seed {
                        Some(s) if losses[s] <= losses[i] => {}
                        _ => seed = Some(i),
                    }
                }
            }
            centroids.push(seed.map(|s| z[s].clone()));
            radii.push(0.0);
            continue;
        }
        let mut mu = vec![0.0; m];
        for c in 0..m {
            for &i in &members {
                mu[c] += z[i][c];
            }
            mu[c] /= members.len() as f64;
        }
        let ds: Vec<f64> = members.iter().map(|&i| dist(&z[i], &mu)).collect();
        let r = match percentile {
            None => {
                let mut r = 0.0;
                for &d in &ds {
                    if d > r {
                        r = d;
                    }
                }
                r
            }
            Some(q) => {
                let need = ((q / 100.0) * ds.len() as f64).ceil().max(1.0) as usize;
                // smallest distance with at least `need` distances at or below it
                let mut best = f64::INFINITY;
                for &d in &ds {
                    let at_or_below = ds.iter().filter(|&&e| e <= d).count();
                    if at_or_below >= need && d < best {
                        best = d;
                    }
                }
                best
            }
        };
        centroids.push(Some(mu));
        radii.push(r);
    }
    (centroids, radii)
}

fn nearest(z: &[f64], centroids: &[Option<Vec<f64>>]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        if let Some(mu) = c {
            let d = dist(z, mu);
            if best.0 == usize::MAX || d < best.1 {
                best = (k, d);
            }
        }
    }
    best
}

fn rows(model: &Model, x: &[f64]) -> Vec<Vec<f64>> {
    x.chunks(model.input_dim()).map(|r| model.features(r).unwrap()).collect()
}

pub struct SourceArgs {
    pub p: f64,
    pub eta: f64,
    pub feature_correction: bool,
    pub label_correction: bool,
    pub percentile: Option<f64>,
}

pub fn source(model: &Model, x: &[f64], observed: &[usize], args: &SourceArgs) -> OracleOutput {
    let z = rows(model, x);
    let k = model.num_classes();
    let losses: Vec<f64> = (0..z.len()).map(|i| loss(model, Head::Source, &z[i], observed[i])).collect();
    let (trusted, gamma) = trust(&losses, args.p);
    let (centroids, radii) = clusters(&z, observed, &losses, &trusted, k, args.percentile);

    let mut labels = observed.to_vec();
    let mut disturbance = vec![None; z.len()];
    let mut records = Vec::new();
    for i in 0..z.len() {
        if trusted[i] {
            continue;
        }
        let (ks, d) = nearest(&z[i], &centroids);
        let r = radii[ks];
        let verdict = if d > r {
            1
        } else if observed[i] != ks {
            2
        } else {
            0
        };
        let mut rec = OracleRecord {
            index: i,
            verdict,
            k_star: ks,
            dist: d,
            radius: r,
            label: observed[i],
            feature: None,
            eta: 0.0,
        };
        if verdict == 1 && args.feature_correction {
            let mu = centroids[ks].as_ref().unwrap();
            rec.feature = Some((0..mu.len()).map(|c| (1.0 - args.eta) * z[i][c] + args.eta * mu[c]).collect());
            rec.label = ks;
            rec.eta = args.eta;
            labels[i] = ks;
            disturbance[i] = Some((ks, args.eta));
        }
        if verdict == 2 && args.label_correction {
            rec.label = ks;
            labels[i] = ks;
        }
        records.push(rec);
    }
    OracleOutput {
        trusted,
        gamma,
        centroids,
        radii,
        labels,
        disturbance,
        records,
    }
}

/// Target pass. `external` replaces the target's own clusters.
pub fn target(
    model: &Model,
    x: &[f64],
    pseudo: &[usize],
    p: f64,
    percentile: Option<f64>,
    external: Option<Clusters>,
) -> OracleOutput {
    let z = rows(model, x);
    let k = model.num_classes();
    let losses: Vec<f64> = (0..z.len()).map(|i| loss(model, Head::Target, &z[i], pseudo[i])).collect();
    let (trusted, gamma) = trust(&losses, p);
    let (centroids, radii) = external.unwrap_or_else(|| clusters(&z, pseudo, &losses, &trusted, k, percentile));

    let mut labels = pseudo.to_vec();
    let mut records = Vec::new();
    for i in 0..z.len() {
        if trusted[i] {
            continue;
        }
        let (ks, d) = nearest(&z[i], &centroids);
        labels[i] = ks;
        records.push(OracleRecord {
            index: i,
            verdict: 2,
            k_star: ks,
            dist: d,
            radius: radii[ks],
            label: ks,
            feature: None,
            eta: 0.0,
        });
    }
    OracleOutput {
        trusted,
        gamma,
        centroids,
        radii,
        labels,
        disturbance: vec![None; z.len()],
        records,
    }
}
