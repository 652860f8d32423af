//! Subcommands behind the `dualcan` binary.
//!
//! Each `cmd_*` function takes a resolved [`Experiment`] and writes its
//! outputs atomically under an output directory, finishing with a
//! `<command>.manifest.json` that records the resolved config, input and output
//! digests and timings.
//!
//! | exit | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | config error |
//! | 3 | IO or file-format error |
//! | 4 | numeric abort (partial outputs kept) |
//! | 5 | some sweep or ablation cells failed |

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::Experiment;
use crate::datagen::{read_dataset, write_csv, write_dataset, NoisyDataset};
use crate::error::Error;
use crate::eval::{
    ablation_battery, ablation_checks, correction_curves, distance_histogram, noise_sweep, sweep_checks, verdict_quality,
    SummaryReport,
};
use crate::io::{sha256_hex, write_atomic};
use crate::model::{read_checkpoint, write_checkpoint, Head, Model};
use crate::nic::{nic_source, write_nic_rows, NoiseVerdict, NIC_REPORT_HEADER};
use crate::trainer::{metrics_csv, run_observed, EpochMetrics, TrainEvent};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_PARTIAL: u8 = 5;

pub const SOURCE_FILE: &str = "source.dcds";
pub const TARGET_FILE: &str = "target.dcds";
pub const CHECKPOINT_FILE: &str = "model.dcmk";
pub const METRICS_FILE: &str = "metrics.csv";

/// Manifest file name for a subcommand; commands sharing a directory do not
/// overwrite each other's manifests.
pub fn manifest_file(command: &str) -> String {
    format!("{command}.manifest.json")
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Parameter(_) | Error::State(_) | Error::Shape { .. } => EXIT_CONFIG,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError {
            code: exit_code(&err),
            message: err.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a command on the same build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub status: String,
    /// The experiment with every default written out, as TOML.
    pub resolved_config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Vec<Timing>,
    pub wall_clock_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<EpochMetrics>>,
}

/// Collects outputs and timings while a command runs.
struct Recorder {
    command: &'static str,
    out_dir: PathBuf,
    started: Instant,
    phase_started: Instant,
    timings: Vec<Timing>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Recorder {
    fn new(command: &'static str, out_dir: &Path) -> Self {
        Recorder {
            command,
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            phase_started: Instant::now(),
            timings: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn phase(&mut self, name: &str) {
        self.timings.push(Timing {
            phase: name.to_string(),
            seconds: self.phase_started.elapsed().as_secs_f64(),
        });
        self.phase_started = Instant::now();
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.out_dir.join(name), bytes)?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }

    fn finish(self, exp: &Experiment, status: &str, metrics: Option<Vec<EpochMetrics>>) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            status: status.to_string(),
            resolved_config: exp.to_toml(),
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            metrics,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.out_dir.join(manifest_file(self.command)), &json)?;
        Ok(manifest)
    }
}

fn dataset_bytes(ds: &NoisyDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("writing to memory cannot fail");
    buf
}

fn csv_bytes(ds: &NoisyDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf).expect("writing to memory cannot fail");
    buf
}

/// Generates the corrupted domain pair and writes it in binary and CSV form.
pub fn cmd_gen(exp: &Experiment, out_dir: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new("gen", out_dir);
    let (source, target) = crate::eval::prepare_data(exp)?;
    rec.phase("generate");
    let src = dataset_bytes(&source);
    let tgt = dataset_bytes(&target);
    rec.write(SOURCE_FILE, &src)?;
    rec.write(TARGET_FILE, &tgt)?;
    rec.write("source.csv", &csv_bytes(&source))?;
    rec.write("target.csv", &csv_bytes(&target))?;
    rec.write("config.resolved.toml", exp.to_toml().as_bytes())?;
    rec.phase("write");
    println!("{}  {SOURCE_FILE}", sha256_hex(&src));
    println!("{}  {TARGET_FILE}", sha256_hex(&tgt));
    rec.finish(exp, "ok", None)
}

fn load_pair(exp: &Experiment, data_dir: &Path, rec: &mut Recorder) -> CliResult<(NoisyDataset, NoisyDataset)> {
    let mut load = |name: &str| -> CliResult<NoisyDataset> {
        let path = data_dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        })?;
        rec.input(&path, &bytes);
        let ds = read_dataset(bytes.as_slice()).map_err(|e| CliError {
            code: exit_code(&e),
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(ds)
    };
    let source = load(SOURCE_FILE)?;
    let target = load(TARGET_FILE)?;
    if source.dim() != exp.domain.feature_dim || source.num_classes() != exp.domain.num_classes {
        return Err(CliError {
            code: EXIT_CONFIG,
            message: format!(
                "datasets in {} have d={} K={}, config says d={} K={}",
                data_dir.display(),
                source.dim(),
                source.num_classes(),
                exp.domain.feature_dim,
                exp.domain.num_classes
            ),
        });
    }
    Ok((source, target))
}

/// Trains on the datasets in `data_dir`. On a numeric abort the metrics so
/// far, the NIC report and the last finite checkpoint are still written and
/// the error carries exit code 4.
pub fn cmd_train(exp: &Experiment, data_dir: &Path, out_dir: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new("train", out_dir);
    let (source, target) = load_pair(exp, data_dir, &mut rec)?;
    rec.phase("load");

    let mut nic = Vec::new();
    nic.extend_from_slice(NIC_REPORT_HEADER.as_bytes());
    nic.push(b'\n');
    let mut nic_err = None;
    let result = run_observed(&exp.train, &source, &target, |event| {
        if let TrainEvent::Epoch {
            metrics,
            source_records,
            target_records,
        } = event
        {
            let written = write_nic_rows(&mut nic, metrics.epoch, "source", source_records)
                .and_then(|_| write_nic_rows(&mut nic, metrics.epoch, "target", target_records));
            if let Err(e) = written {
                nic_err.get_or_insert(e);
            }
        }
    });
    rec.phase("train");
    if let Some(e) = nic_err {
        return Err(e.into());
    }

    let (model, history, failure) = match result {
        Ok(out) => (out.model, out.history, None),
        Err(f) => {
            let f = *f;
            (f.checkpoint, f.history, Some(f.error))
        }
    };
    if let Some(e) = failure.as_ref().filter(|e| !matches!(e, Error::Numeric(_))) {
        return Err(CliError {
            code: exit_code(e),
            message: e.to_string(),
        });
    }
    rec.write(METRICS_FILE, metrics_csv(&history).as_bytes())?;
    rec.write("nic_report.csv", &nic)?;
    rec.write("curves.csv", correction_curves(&history).to_csv().as_bytes())?;
    let mut ckpt = Vec::new();
    write_checkpoint(&model, &mut ckpt)?;
    rec.write(CHECKPOINT_FILE, &ckpt)?;
    rec.phase("write");

    match failure {
        None => {
            if let Some(last) = history.last() {
                println!(
                    "epochs {}  target_acc {:.4}  source_acc {:.4}",
                    history.len(),
                    last.target_accuracy,
                    last.source_accuracy
                );
            }
            rec.finish(exp, "ok", Some(history))
        }
        Some(e) => {
            rec.finish(exp, "numeric_abort", Some(history))?;
            Err(CliError {
                code: EXIT_NUMERIC,
                message: e.to_string(),
            })
        }
    }
}

fn write_report(rec: &mut Recorder, report: &SummaryReport) -> CliResult<()> {
    rec.write("report.txt", report.to_text().as_bytes())?;
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    rec.write("report.json", &json)?;
    print!("{}", report.to_text());
    Ok(())
}

fn partial(rec: Recorder, exp: &Experiment, failed: bool) -> CliResult<RunManifest> {
    if failed {
        rec.finish(exp, "partial", None)?;
        return Err(CliError {
            code: EXIT_PARTIAL,
            message: "some cells failed; see the cells CSV".into(),
        });
    }
    rec.finish(exp, "ok", None)
}

/// Runs the `[sweep]` grid and writes the aggregate table and checks.
pub fn cmd_sweep(exp: &Experiment, out_dir: &Path, jobs: usize) -> CliResult<RunManifest> {
    let sweep = exp
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::from(Error::Config("missing [sweep] section".into())))?;
    let mut rec = Recorder::new("sweep", out_dir);
    let result = noise_sweep(exp, &sweep.levels, &sweep.methods, &sweep.seeds, jobs)?;
    rec.phase("run");
    rec.write("sweep.csv", result.to_csv().as_bytes())?;
    rec.write("sweep_cells.csv", result.cells_csv().as_bytes())?;
    write_report(&mut rec, &sweep_checks(&result))?;
    rec.phase("write");
    partial(rec, exp, result.any_failed())
}

/// Runs the five ablation rows over the `[ablation]` seeds.
pub fn cmd_ablate(exp: &Experiment, out_dir: &Path, jobs: usize) -> CliResult<RunManifest> {
    let section = exp
        .ablation
        .as_ref()
        .ok_or_else(|| CliError::from(Error::Config("missing [ablation] section".into())))?;
    let mut rec = Recorder::new("ablate", out_dir);
    let table = ablation_battery(exp, &section.seeds, jobs)?;
    rec.phase("run");
    rec.write("ablation.csv", table.to_csv().as_bytes())?;
    rec.write("ablation_cells.csv", table.cells_csv().as_bytes())?;
    write_report(&mut rec, &ablation_checks(&table))?;
    rec.phase("write");
    partial(rec, exp, table.any_failed())
}

#[derive(Debug, Clone, Serialize)]
struct Diagnostics {
    source_accuracy: f64,
    target_accuracy: f64,
    verdicts: crate::eval::VerdictQuality,
    mean_distance: [Option<f64>; 3],
}

/// Scores a trained checkpoint against the hidden ground truth: accuracies,
/// verdict quality of one correction pass, and distance histograms.
pub fn cmd_report(exp: &Experiment, data_dir: &Path, out_dir: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new("report", out_dir);
    let (source, target) = load_pair(exp, data_dir, &mut rec)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let ckpt = std::fs::read(&ckpt_path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", ckpt_path.display()),
    })?;
    rec.input(&ckpt_path, &ckpt);
    let model: Model = read_checkpoint(ckpt.as_slice())?;
    if model.input_dim() != source.dim() || model.num_classes() != source.num_classes() {
        return Err(CliError::from(Error::Config("checkpoint does not match the datasets".into())));
    }
    rec.phase("load");

    let opts = exp.train.nic_options(0.0);
    let pass = nic_source(&source, &model, &opts)?;
    let flags = source.ground_truth().noise_flags;
    let verdicts = verdict_quality(&pass.records, flags)?;
    let hist = distance_histogram(source.features(), &model, &pass.clusters, flags, 30)?;
    let diag = Diagnostics {
        source_accuracy: crate::eval::accuracy(&model, Head::Source, source.features(), source.ground_truth().clean_labels)?,
        target_accuracy: crate::eval::accuracy(&model, Head::Target, target.features(), target.ground_truth().clean_labels)?,
        verdicts,
        mean_distance: hist.means,
    };
    rec.phase("evaluate");

    let mut report = SummaryReport::default();
    let fi = NoiseVerdict::FeatureNoise.index();
    let li = NoiseVerdict::LabelNoise.index();
    if let (Some(f), Some(l)) = (hist.means[fi], hist.means[li]) {
        report.push(
            "feature noise farther from centroids than label noise",
            f > l,
            format!("{f:.4} vs {l:.4}"),
        );
    }
    rec.write("distances.csv", hist.to_csv().as_bytes())?;
    rec.write("diagnostics.json", &serde_json::to_vec_pretty(&diag).expect("diagnostics serialize"))?;
    write_report(&mut rec, &report)?;
    rec.phase("write");
    rec.finish(exp, "ok", None)
}

#[derive(Debug, Parser)]
#[command(name = "dualcan", version, about = "Noisy domain adaptation with dual correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment TOML file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding source.dcds and target.dcds.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Re-seeds the experiment; for sweep and ablate it replaces the seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate and corrupt the domain pair.
    Gen,
    /// Train on generated data.
    Train,
    /// Noise-level sweep.
    Sweep,
    /// Ablation battery.
    Ablate,
    /// Score a trained checkpoint.
    Report,
}

fn resolve(common: &CommonArgs, command: Command) -> CliResult<Experiment> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::from(Error::Config("--config is required".into())))?;
    let mut exp = Experiment::load(path).map_err(|e| match e {
        Error::Io(io) => CliError {
            code: EXIT_CONFIG,
            message: format!("cannot read {}: {io}", path.display()),
        },
        other => other.into(),
    })?;
    if let Some(seed) = common.seed {
        match command {
            Command::Sweep => {
                if let Some(s) = &mut exp.sweep {
                    s.seeds = vec![seed];
                }
            }
            Command::Ablate => {
                if let Some(a) = &mut exp.ablation {
                    a.seeds = vec![seed];
                }
            }
            _ => exp = exp.with_seed(seed),
        }
    }
    Ok(exp)
}

pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let common = &cli.common;
    let exp = resolve(common, cli.command)?;
    let data_dir = || common.data_dir.clone().unwrap_or_else(|| common.out_dir.clone());
    let jobs = common.jobs.max(1);
    match cli.command {
        Command::Gen => cmd_gen(&exp, &common.out_dir),
        Command::Train => cmd_train(&exp, &data_dir(), &common.out_dir),
        Command::Sweep => cmd_sweep(&exp, &common.out_dir, jobs),
        Command::Ablate => cmd_ablate(&exp, &common.out_dir, jobs),
        Command::Report => cmd_report(&exp, &data_dir(), &common.out_dir),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
