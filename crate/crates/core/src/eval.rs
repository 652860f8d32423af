//! Ground-truth-aware measurement and experiment batteries.
//!
//! Everything here may read the hidden clean labels and noise flags of a
//! dataset. Nothing here mutates a model or a dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Experiment;
use crate::datagen::{corrupt, make_domain_pair, NoiseFlags, NoiseKind, NoisyDataset};
use crate::error::{Error, Result};
use crate::model::{Head, Model};
use crate::nic::{nearest_cluster, ClusterModel, CorrectionRecord, NoiseVerdict};
use crate::trainer::{self, argmax, Ablation, RunOutput};

/// Fraction of rows whose `head` argmax equals the clean label.
pub fn accuracy(model: &Model, head: Head, features: &[f64], clean_labels: &[usize]) -> Result<f64> {
    if clean_labels.is_empty() {
        return Err(Error::param("accuracy of an empty set"));
    }
    let d = model.input_dim();
    if features.len() != clean_labels.len() * d {
        return Err(Error::param("feature rows do not match label count"));
    }
    let mut hits = 0usize;
    for (x, &y) in features.chunks_exact(d).zip(clean_labels) {
        if argmax(&model.predict(head, x)?) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / clean_labels.len() as f64)
}

/// Fraction of `labels` that differ from `clean_labels`.
pub fn label_error(labels: &[usize], clean_labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || labels.len() != clean_labels.len() {
        return Err(Error::param("label vectors must be non-empty and equally long"));
    }
    let wrong = labels.iter().zip(clean_labels).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Ground-truth class of an instance. Instances corrupted in both channels
/// count as label noise.
pub fn truth_class(flags: NoiseFlags) -> NoiseVerdict {
    if flags.label_corrupted {
        NoiseVerdict::LabelNoise
    } else if flags.feature_corrupted {
        NoiseVerdict::FeatureNoise
    } else {
        NoiseVerdict::Clean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictQuality {
    /// `confusion[truth][verdict]`, indexed by [`NoiseVerdict::index`].
    pub confusion: [[usize; 3]; 3],
    /// Number of records per verdict.
    pub counts: [usize; 3],
    /// `None` where no record carries that verdict.
    pub precision: [Option<f64>; 3],
    /// `None` where no record has that ground truth.
    pub recall: [Option<f64>; 3],
}

pub fn verdict_quality(records: &[CorrectionRecord], flags: &[NoiseFlags]) -> Result<VerdictQuality> {
    let mut seen = vec![false; flags.len()];
    let mut confusion = [[0usize; 3]; 3];
    for r in records {
        let slot = seen
            .get_mut(r.index)
            .ok_or_else(|| Error::param(format!("record index {} outside {} flags", r.index, flags.len())))?;
        if std::mem::replace(slot, true) {
            return Err(Error::param(format!("duplicate record for index {}", r.index)));
        }
        confusion[truth_class(flags[r.index]).index()][r.verdict.index()] += 1;
    }
    let mut counts = [0; 3];
    let mut precision = [None; 3];
    let mut recall = [None; 3];
    for v in 0..3 {
        counts[v] = (0..3).map(|t| confusion[t][v]).sum();
        let truth: usize = confusion[v].iter().sum();
        if counts[v] > 0 {
            precision[v] = Some(confusion[v][v] as f64 / counts[v] as f64);
        }
        if truth > 0 {
            recall[v] = Some(confusion[v][v] as f64 / truth as f64);
        }
    }
    Ok(VerdictQuality {
        confusion,
        counts,
        precision,
        recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCurves {
    pub epochs: Vec<usize>,
    pub residual_source_noise: Vec<f64>,
    pub detected_source_noise: Vec<f64>,
    pub pseudo_label_error: Vec<f64>,
    /// End minus start of each curve.
    pub residual_delta: f64,
    pub pseudo_label_delta: f64,
}

pub fn correction_curves(history: &[trainer::EpochMetrics]) -> CorrectionCurves {
    let residual: Vec<f64> = history.iter().map(|m| m.residual_source_noise_ratio).collect();
    let pl: Vec<f64> = history.iter().map(|m| m.pseudo_label_error).collect();
    let delta = |v: &[f64]| match (v.first(), v.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    CorrectionCurves {
        epochs: history.iter().map(|m| m.epoch).collect(),
        residual_delta: delta(&residual),
        pseudo_label_delta: delta(&pl),
        detected_source_noise: history.iter().map(|m| m.detected_source_noise_ratio).collect(),
        residual_source_noise: residual,
        pseudo_label_error: pl,
    }
}

impl CorrectionCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,residual_source_noise_ratio,pseudo_label_error,detected_source_noise_ratio\n");
        for i in 0..self.epochs.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.epochs[i], self.residual_source_noise[i], self.pseudo_label_error[i], self.detected_source_noise[i]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    /// `bins + 1` shared edges spanning `[0, max distance]`.
    pub edges: Vec<f64>,
    /// Bin counts per ground-truth group, indexed by [`NoiseVerdict::index`].
    pub counts: [Vec<usize>; 3],
    pub means: [Option<f64>; 3],
    pub distances: Vec<f64>,
}

/// Distance of every row's generator feature to its nearest non-empty
/// centroid, histogrammed per ground-truth group.
pub fn distance_histogram(
    features: &[f64],
    model: &Model,
    clusters: &ClusterModel,
    flags: &[NoiseFlags],
    bins: usize,
) -> Result<DistanceHistogram> {
    if bins == 0 {
        return Err(Error::param("need at least one bin"));
    }
    let z = model.features_batch(features)?;
    let m = model.feature_dim();
    if z.len() != flags.len() * m {
        return Err(Error::param("feature rows do not match flag count"));
    }
    let distances: Vec<f64> = z
        .chunks_exact(m)
        .map(|row| nearest_cluster(row, clusters).map(|(_, d)| d))
        .collect::<Result<_>>()?;
    let max = distances.iter().copied().fold(0.0, f64::max);
    let bins = if max == 0.0 { 1 } else { bins };
    let edges: Vec<f64> = (0..=bins).map(|b| max * b as f64 / bins as f64).collect();

    let mut counts: [Vec<usize>; 3] = std::array::from_fn(|_| vec![0; bins]);
    let mut sums = [0.0; 3];
    let mut n = [0usize; 3];
    for (d, f) in distances.iter().zip(flags) {
        let g = truth_class(*f).index();
        let b = if max == 0.0 {
            0
        } else {
            ((d / max * bins as f64) as usize).min(bins - 1)
        };
        counts[g][b] += 1;
        sums[g] += d;
        n[g] += 1;
    }
    let means = std::array::from_fn(|g| (n[g] > 0).then(|| sums[g] / n[g] as f64));
    Ok(DistanceHistogram {
        edges,
        counts,
        means,
        distances,
    })
}

impl DistanceHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,clean,feature_noise,label_noise\n");
        for b in 0..self.edges.len() - 1 {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.edges[b], self.edges[b + 1], self.counts[0][b], self.counts[1][b], self.counts[2][b]
            );
        }
        out
    }
}

/// Named correction presets compared by the batteries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    NoFeatureCorrection,
    NoLabelCorrection,
    NoSourceCorrection,
    NoTargetCorrection,
    /// Every correction off: pseudo-label self-training plus source training.
    NoCorrection,
}

impl Method {
    /// The ablation rows, full configuration first.
    pub const ABLATION_ROWS: [Method; 5] = [
        Method::Full,
        Method::NoFeatureCorrection,
        Method::NoLabelCorrection,
        Method::NoSourceCorrection,
        Method::NoTargetCorrection,
    ];

    pub fn ablation(self) -> Ablation {
        let full = Ablation::FULL;
        match self {
            Method::Full => full,
            Method::NoFeatureCorrection => Ablation {
                feature_correction: false,
                ..full
            },
            Method::NoLabelCorrection => Ablation {
                label_correction: false,
                ..full
            },
            Method::NoSourceCorrection => Ablation {
                source_correction: false,
                ..full
            },
            Method::NoTargetCorrection => Ablation {
                target_correction: false,
                ..full
            },
            Method::NoCorrection => Ablation::NONE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoFeatureCorrection => "no_feature_correction",
            Method::NoLabelCorrection => "no_label_correction",
            Method::NoSourceCorrection => "no_source_correction",
            Method::NoTargetCorrection => "no_target_correction",
            Method::NoCorrection => "no_correction",
        }
    }
}

/// Builds the corrupted domain pair an experiment describes.
pub fn prepare_data(exp: &Experiment) -> Result<(NoisyDataset, NoisyDataset)> {
    let (source, target) = make_domain_pair(&exp.domain)?;
    let source = corrupt(&source, &exp.noise)?;
    let target = match &exp.target_noise {
        Some(n) => corrupt(&target, n)?,
        None => target,
    };
    Ok((source, target))
}

/// Generates data and trains one experiment end to end.
pub fn run_experiment(exp: &Experiment) -> Result<RunOutput> {
    let (source, target) = prepare_data(exp)?;
    trainer::run(&exp.train, &source, &target).map_err(|f| f.error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub level: f64,
    pub method: Method,
    pub seed: u64,
    /// Final target accuracy, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// Seeds that completed.
    pub n: usize,
    pub failed: usize,
}

fn aggregate(values: &[f64], failed: usize) -> Aggregate {
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Aggregate { mean, std, n, failed }
}

fn run_cells(
    base: &Experiment,
    cells: Vec<(f64, Method, u64)>,
    jobs: usize,
    level_to_noise: bool,
) -> Result<Vec<CellResult>> {
    let work = |&(level, method, seed): &(f64, Method, u64)| {
        let mut exp = base.with_seed(seed);
        exp.train.ablation = method.ablation();
        if level_to_noise {
            exp.noise.kind = NoiseKind::Mixed;
            exp.noise.p_noise = level;
        }
        let outcome = run_experiment(&exp)
            .map(|out| out.history.last().map_or(f64::NAN, |m| m.target_accuracy))
            .map_err(|e| e.to_string());
        CellResult {
            level,
            method,
            seed,
            outcome,
        }
    };
    if jobs <= 1 {
        return Ok(cells.iter().map(work).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::state(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(work).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    /// `summary[level][method]`.
    pub summary: Vec<Vec<Aggregate>>,
}

impl SweepResult {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.outcome.is_err())
    }

    pub fn cell(&self, level: usize, method: Method) -> Option<&Aggregate> {
        let m = self.methods.iter().position(|x| *x == method)?;
        self.summary.get(level)?.get(m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,method,mean_target_acc,std_target_acc,seeds,failed\n");
        for (l, level) in self.levels.iter().enumerate() {
            for (m, method) in self.methods.iter().enumerate() {
                let a = &self.summary[l][m];
                let _ = writeln!(out, "{level},{},{},{},{},{}", method.name(), a.mean, a.std, a.n, a.failed);
            }
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        cells_csv(&self.cells)
    }
}

fn cells_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("level,method,seed,final_target_acc,error\n");
    for c in cells {
        match &c.outcome {
            Ok(acc) => {
                let _ = writeln!(out, "{},{},{},{acc},", c.level, c.method.name(), c.seed);
            }
            Err(e) => {
                let _ = writeln!(out, "{},{},{},,{}", c.level, c.method.name(), c.seed, e.replace([',', '\n'], ";"));
            }
        }
    }
    out
}

/// Full factorial `level x method x seed` grid of mixed-noise runs. Failed
/// cells are kept and counted, never dropped.
pub fn noise_sweep(
    base: &Experiment,
    levels: &[f64],
    methods: &[Method],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if levels.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(Error::param("sweep needs at least one level, method and seed"));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=2.0).contains(*l)) {
        return Err(Error::param(format!("noise level {l} outside [0, 2]")));
    }
    let mut grid = Vec::with_capacity(levels.len() * methods.len() * seeds.len());
    for &l in levels {
        for &m in methods {
            for &s in seeds {
                grid.push((l, m, s));
            }
        }
    }
    let cells = run_cells(base, grid, jobs, true)?;
    let summary = levels
        .iter()
        .map(|&l| {
            methods
                .iter()
                .map(|&m| summarize(&cells, |c| c.level == l && c.method == m))
                .collect()
        })
        .collect();
    Ok(SweepResult {
        levels: levels.to_vec(),
        methods: methods.to_vec(),
        seeds: seeds.to_vec(),
        cells,
        summary,
    })
}

fn summarize(cells: &[CellResult], pick: impl Fn(&CellResult) -> bool) -> Aggregate {
    let mut ok = Vec::new();
    let mut failed = 0;
    for c in cells.iter().filter(|c| pick(c)) {
        match c.outcome {
            Ok(v) => ok.push(v),
            Err(_) => failed += 1,
        }
    }
    aggregate(&ok, failed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub ablation: Ablation,
    pub result: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn row(&self, method: Method) -> Option<&Aggregate> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.result)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.outcome.is_err())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,feature_correction,label_correction,source_correction,target_correction,mean_target_acc,std_target_acc,seeds,failed\n",
        );
        for r in &self.rows {
            let a = r.ablation;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method.name(),
                a.feature_correction,
                a.label_correction,
                a.source_correction,
                a.target_correction,
                r.result.mean,
                r.result.std,
                r.result.n,
                r.result.failed
            );
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        cells_csv(&self.cells)
    }
}

/// The five ablation rows on the experiment's own noise setting.
pub fn ablation_battery(base: &Experiment, seeds: &[u64], jobs: usize) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::param("ablation needs at least one seed"));
    }
    let level = base.noise.p_noise;
    let grid: Vec<(f64, Method, u64)> = Method::ABLATION_ROWS
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (level, m, s)))
        .collect();
    let cells = run_cells(base, grid, jobs, false)?;
    let rows = Method::ABLATION_ROWS
        .iter()
        .map(|&m| AblationRow {
            method: m,
            ablation: m.ablation(),
            result: summarize(&cells, |c| c.method == m),
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        cells,
    })
}

/// One directional claim evaluated on experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub checks: Vec<Check>,
}

impl SummaryReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

/// Pooled standard deviation of two aggregates.
fn pooled(a: &Aggregate, b: &Aggregate) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

/// Directional checks over a sweep: every method degrades (within one
/// pooled std per step) as noise grows, and full correction beats the
/// no-correction baseline at level 0.4 when both are present.
pub fn sweep_checks(sweep: &SweepResult) -> SummaryReport {
    let mut report = SummaryReport::default();
    for (mi, method) in sweep.methods.iter().enumerate() {
        let mut ok = true;
        let mut worst = String::new();
        for l in 1..sweep.levels.len() {
            let prev = &sweep.summary[l - 1][mi];
            let cur = &sweep.summary[l][mi];
            let slack = pooled(prev, cur);
            let bound = prev.mean + slack;
            if cur.mean.is_nan() || bound.is_nan() || cur.mean > bound {
                ok = false;
                let _ = write!(
                    worst,
                    "level {} -> {}: {:.4} > {:.4} + {:.4}; ",
                    sweep.levels[l - 1],
                    sweep.levels[l],
                    cur.mean,
                    prev.mean,
                    slack
                );
            }
        }
        let first = &sweep.summary[0][mi];
        let last = &sweep.summary[sweep.levels.len() - 1][mi];
        let detail = if ok {
            format!(
                "mean {:.4} at level {} -> {:.4} at level {}",
                first.mean,
                sweep.levels[0],
                last.mean,
                sweep.levels[sweep.levels.len() - 1]
            )
        } else {
            worst
        };
        report.push(format!("{}: accuracy non-increasing in noise level", method.name()), ok, detail);
    }
    if let Some(l) = sweep.levels.iter().position(|l| (*l - 0.4).abs() < 1e-12) {
        if let (Some(full), Some(base)) = (sweep.cell(l, Method::Full), sweep.cell(l, Method::NoCorrection)) {
            report.push(
                "full beats no_correction at level 0.4",
                full.mean > base.mean,
                format!("{:.4} vs {:.4}", full.mean, base.mean),
            );
        }
    }
    report.push(
        "every sweep cell completed",
        !sweep.any_failed(),
        format!("{} failed of {}", sweep.cells.iter().filter(|c| c.outcome.is_err()).count(), sweep.cells.len()),
    );
    report
}

/// Ablation ordering checks: full >= without source correction, and
/// dropping label correction hurts at least as much as dropping feature
/// correction.
pub fn ablation_checks(table: &AblationTable) -> SummaryReport {
    let mut report = SummaryReport::default();
    let get = |m| table.row(m).map(|a| a.mean).unwrap_or(f64::NAN);
    let full = get(Method::Full);
    let no_src = get(Method::NoSourceCorrection);
    let no_label = get(Method::NoLabelCorrection);
    let no_feat = get(Method::NoFeatureCorrection);
    report.push(
        "full >= no_source_correction",
        full >= no_src,
        format!("{full:.4} vs {no_src:.4}"),
    );
    report.push(
        "no_label_correction <= no_feature_correction",
        no_label <= no_feat,
        format!("{no_label:.4} vs {no_feat:.4}"),
    );
    report.push(
        "every ablation cell completed",
        !table.any_failed(),
        format!("{} failed of {}", table.cells.iter().filter(|c| c.outcome.is_err()).count(), table.cells.len()),
    );
    report
}
