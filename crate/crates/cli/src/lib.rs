//! `vimu` command-line front end.
//!
//! Each subcommand writes its products plus a run manifest recording input
//! and output hashes. Exit codes: 0 success, 2 usage or configuration, 3 I/O,
//! 4 numerical failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vimu_core::allan::{compute_av, default_taus, fit_noise_coeffs, to_noise_params, AvFit, AxisAnalysis};
use vimu_core::data::{
    compute_norm_stats, load_csv, make_windows, normalize, save_csv, ImuSeries, WindowingConfig, CHANNELS,
    CHANNEL_NAMES,
};
use vimu_core::denoiser::DenoiserCheckpoint;
use vimu_core::nav::{
    dead_reckon, error_series, error_stats, improvement_percent, load_nav_csv, nav_improvement, rmse_per_axis,
    save_error_csv, save_nav_csv, save_track_csv, NavErrorStats, NavImprovement,
};
use vimu_core::sampler::{generate_series, SampleConfig, StitchMode};
use vimu_core::sim::{
    builtin_specs, corrupt, corruption_seeds, generate_truth, NoiseParams, SpecPair, TrajectoryProfile,
};
use vimu_core::train::{fit, save_loss_history, TrainConfig, TrainingData};

pub mod plot;

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest series the Allan command accepts: cluster sizes must span two
/// decades and the largest cluster is half the series.
pub const MIN_ALLAN_SAMPLES: usize = 200;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<vimu_core::Error> for CliError {
    fn from(e: vimu_core::Error) -> Self {
        use vimu_core::Error as E;
        let code = match &e {
            E::Io { .. } => 3,
            E::Numerical(_) => 4,
            E::Autodiff(vimu_core::autodiff::AutodiffError::Io(_)) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(format!("json: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "vimu",
    version,
    about = "Virtual high-grade IMU synthesis from low-cost IMU data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory and its reference / low-cost IMU recordings.
    Simulate(SimulateArgs),
    /// Allan-variance analysis and noise coefficient fit of a recording.
    Allan(AllanArgs),
    /// Train the conditional denoiser on a paired recording.
    Train(TrainArgs),
    /// Generate a virtual high-grade series from a low-cost recording.
    Generate(GenerateArgs),
    /// Compare a candidate series against a baseline: RMSE and dead reckoning.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Trajectory profile JSON.
    #[arg(long)]
    pub profile: PathBuf,
    /// Sensor specification pair JSON, or `builtin`.
    #[arg(long, default_value = "builtin")]
    pub specs: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seed of the sensor error draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct AllanArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Curve CSV, one row per cluster size with the σ² of every axis.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
    /// Noise-parameter JSON usable as `train --noise-params`.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
    /// Log-log plot of the six curves.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub lowcost: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Low-cost noise parameters (physical units).
    #[arg(long)]
    pub noise_params: PathBuf,
    /// Training configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path. The loss history and normalization statistics are
    /// written next to it as `<stem>.loss.csv` and `<stem>.norm_stats.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StitchArg {
    NonOverlapping,
    OverlapAverage,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub lowcost: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "non-overlapping")]
    pub stitch: StitchArg,
    /// Window stride for overlap averaging; defaults to half the window.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Series under test (e.g. the virtual IMU).
    #[arg(long)]
    pub candidate: PathBuf,
    /// Series to improve on (e.g. the raw low-cost IMU).
    #[arg(long)]
    pub baseline: PathBuf,
    /// High-grade series the RMSE is measured against.
    #[arg(long)]
    pub reference: PathBuf,
    /// True navigation states; the first one initializes dead reckoning.
    #[arg(long)]
    pub truth_nav: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-sample error and track CSVs (and SVG plots with
    /// `--svg`).
    #[arg(long)]
    pub series_dir: Option<PathBuf>,
    #[arg(long, requires = "series_dir")]
    pub svg: bool,
    /// Dead-reckon without gravity compensation.
    #[arg(long)]
    pub no_gravity: bool,
}

/// Training configuration file: the trainer settings plus the windowing
/// stride. The window length is the model's.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Defaults to a quarter of the window length.
    #[serde(default)]
    pub window_stride: Option<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl TrainFile {
    pub fn windowing(&self) -> WindowingConfig {
        let length = self.train.model.window_len;
        WindowingConfig {
            length,
            stride: self.window_stride.unwrap_or((length / 4).max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// SHA-256 of the resolved command arguments as JSON.
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn digests(paths: &[PathBuf]) -> CliResult<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Write through a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `<path>` with `suffix` appended to the file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `<dir>/<stem><suffix>` for a path like `dir/stem.ext`.
pub fn stem_sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

struct Run<'a, A: Serialize> {
    name: &'static str,
    args: &'a A,
    seed: Option<u64>,
    started: Instant,
}

impl<'a, A: Serialize> Run<'a, A> {
    fn new(name: &'static str, args: &'a A, seed: Option<u64>) -> Self {
        Self {
            name,
            args,
            seed,
            started: Instant::now(),
        }
    }

    fn finish(self, manifest: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<RunManifest> {
        let m = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: self.name.to_string(),
            config_sha256: sha256_bytes(&serde_json::to_vec(self.args)?),
            inputs: digests(inputs)?,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: digests(outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(manifest, &m)?;
        log::info!(
            "{} finished in {:.1} s, manifest {}",
            self.name,
            m.wall_time_s,
            manifest.display()
        );
        Ok(m)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a).map(|_| ()),
        Command::Allan(a) => allan(&a).map(|_| ()),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Generate(a) => generate(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate(&a).map(|_| ()),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_specs(arg: &str) -> CliResult<SpecPair> {
    if arg == "builtin" {
        Ok(builtin_specs())
    } else {
        Ok(SpecPair::load_json(Path::new(arg))?)
    }
}

pub fn simulate(a: &SimulateArgs) -> CliResult<RunManifest> {
    let run = Run::new("simulate", a, Some(a.seed));
    let profile = TrajectoryProfile::load_json(&a.profile)?;
    let specs = load_specs(&a.specs)?;
    let rate = specs.reference.rate_hz;
    if (specs.lowcost.rate_hz - rate).abs() > 1e-9 * rate {
        return Err(CliError::usage(format!(
            "field `lowcost.rate_hz`: {} differs from reference rate {rate}",
            specs.lowcost.rate_hz
        )));
    }
    ensure_dir(&a.out_dir)?;
    let (truth, nav) = generate_truth(&profile, rate)?;
    let (ref_seed, low_seed) = corruption_seeds(a.seed);
    let reference = corrupt(&truth, &specs.reference.noise_params(), ref_seed)?;
    let lowcost = corrupt(&truth, &specs.lowcost.noise_params(), low_seed)?;

    let out = |name: &str| a.out_dir.join(name);
    save_csv(&truth, &out("truth.csv"))?;
    save_csv(&reference, &out("reference.csv"))?;
    save_csv(&lowcost, &out("lowcost.csv"))?;
    save_nav_csv(&nav, &out("truth_nav.csv"))?;
    specs
        .reference
        .noise_params()
        .save_json(&out("reference_noise_params.json"))?;
    specs
        .lowcost
        .noise_params()
        .save_json(&out("lowcost_noise_params.json"))?;
    log::info!(
        "simulated {} samples of {} at {rate} Hz",
        truth.len(),
        profile.kind.name()
    );

    let mut inputs = vec![a.profile.clone()];
    if a.specs != "builtin" {
        inputs.push(PathBuf::from(&a.specs));
    }
    let outputs: Vec<PathBuf> = [
        "truth.csv",
        "reference.csv",
        "lowcost.csv",
        "truth_nav.csv",
        "reference_noise_params.json",
        "lowcost_noise_params.json",
    ]
    .iter()
    .map(|n| out(n))
    .collect();
    run.finish(&out("manifest.json"), &inputs, &outputs)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AllanReport {
    pub schema_version: u32,
    pub sample_rate_hz: f64,
    pub samples: usize,
    pub axes: Vec<AxisAnalysis>,
    pub noise_params: NoiseParams,
}

pub fn allan(a: &AllanArgs) -> CliResult<RunManifest> {
    let run = Run::new("allan", a, None);
    let series = load_csv(&a.input)?;
    if series.len() < MIN_ALLAN_SAMPLES {
        return Err(CliError::usage(format!(
            "{}: {} samples, Allan analysis needs at least {MIN_ALLAN_SAMPLES}",
            a.input.display(),
            series.len()
        )));
    }
    let rate = series.sample_rate_hz();
    let sizes = default_taus(series.len());
    let mut axes = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let curve = compute_av(series.channel(c), rate, &sizes)?;
        let fit = fit_noise_coeffs(&curve)?;
        axes.push(AxisAnalysis {
            axis: CHANNEL_NAMES[c].to_string(),
            fit,
            curve,
        });
    }
    let fits: [AvFit; CHANNELS] = std::array::from_fn(|c| axes[c].fit);
    let params = to_noise_params(&fits, rate);
    let report = AllanReport {
        schema_version: SCHEMA_VERSION,
        sample_rate_hz: rate,
        samples: series.len(),
        axes,
        noise_params: params.clone(),
    };
    write_json(&a.out, &report)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.curve_out {
        write_atomic(path, curve_csv(&report.axes).as_bytes())?;
        outputs.push(path.clone());
    }
    if let Some(path) = &a.params_out {
        params.save_json(path)?;
        outputs.push(path.clone());
    }
    if let Some(path) = &a.svg {
        let lines: Vec<plot::Line> = report
            .axes
            .iter()
            .map(|x| plot::Line {
                name: x.axis.clone(),
                points: x
                    .curve
                    .taus
                    .iter()
                    .zip(x.curve.sigma())
                    .filter(|(_, s)| *s > 0.0)
                    .map(|(t, s)| (*t, s))
                    .collect(),
            })
            .collect();
        let svg = plot::chart(
            &lines,
            &plot::Axes {
                title: "Allan deviation",
                x_label: "tau [s]",
                y_label: "sigma",
                log_x: true,
                log_y: true,
            },
        );
        write_atomic(path, svg.as_bytes())?;
        outputs.push(path.clone());
    }
    run.finish(&sibling(&a.out, ".manifest.json"), &[a.input.clone()], &outputs)
}

/// `tau,count,gx,...,az` with σ² per axis. Every axis shares the cluster
/// sizes, so there is one row per tau.
pub fn curve_csv(axes: &[AxisAnalysis]) -> String {
    let mut s = format!("tau,count,{}\n", CHANNEL_NAMES.join(","));
    let first = &axes[0].curve;
    for i in 0..first.len() {
        let vals: Vec<String> = axes.iter().map(|x| format!("{:e}", x.curve.sigma2[i])).collect();
        s += &format!("{:e},{},{}\n", first.taus[i], first.cluster_counts[i], vals.join(","));
    }
    s
}

fn check_paired(a: &ImuSeries, b: &ImuSeries, what: &str) -> CliResult<()> {
    if a.len() != b.len() {
        return Err(CliError::usage(format!(
            "{what}: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let rate = a.sample_rate_hz();
    if (b.sample_rate_hz() - rate).abs() > 1e-6 * rate {
        return Err(CliError::usage(format!(
            "{what}: sample rates differ ({rate} vs {} Hz)",
            b.sample_rate_hz()
        )));
    }
    if (a.start_time_s() - b.start_time_s()).abs() > 0.5 * a.dt() {
        return Err(CliError::usage(format!(
            "{what}: start times differ ({} vs {} s)",
            a.start_time_s(),
            b.start_time_s()
        )));
    }
    Ok(())
}

pub fn load_train_file(path: &Path) -> CliResult<TrainFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let f: TrainFile = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if f.schema_version != SCHEMA_VERSION {
        return Err(CliError::usage(format!(
            "{}: field `schema_version`: unsupported value {}",
            path.display(),
            f.schema_version
        )));
    }
    f.train.validate()?;
    f.windowing().validate()?;
    Ok(f)
}

pub fn train(a: &TrainArgs) -> CliResult<RunManifest> {
    let file = load_train_file(&a.config)?;
    let run = Run::new("train", a, Some(file.train.seed));
    let lowcost = load_csv(&a.lowcost)?;
    let reference = load_csv(&a.reference)?;
    check_paired(&lowcost, &reference, "low-cost/reference pair")?;
    let noise_params = NoiseParams::load_json(&a.noise_params)?;
    let rate = lowcost.sample_rate_hz();
    if (noise_params.sample_rate_hz - rate).abs() > 1e-6 * rate {
        return Err(CliError::usage(format!(
            "field `sample_rate_hz`: noise parameters are for {} Hz, data is {rate} Hz",
            noise_params.sample_rate_hz
        )));
    }
    let windowing = file.windowing();
    let raw_ref = make_windows(&reference, &windowing)?;
    let raw_low = make_windows(&lowcost, &windowing)?;
    let stats = compute_norm_stats(&raw_ref)?;
    let data = TrainingData {
        reference: raw_ref.iter().map(|w| normalize(w, &stats)).collect(),
        lowcost: raw_low.iter().map(|w| normalize(w, &stats)).collect(),
        stats: stats.clone(),
        noise_params,
        dt: lowcost.dt(),
    };
    log::info!(
        "training on {} windows of {} (stride {}), {} epochs",
        data.lowcost.len(),
        windowing.length,
        windowing.stride,
        file.train.epochs
    );
    let (checkpoint, history) = fit(&data, &file.train)?;
    if let Some(last) = history.last() {
        log::info!("final loss: simple {:.5}, total {:.5}", last.l_simple, last.l_total);
    }
    let loss_path = stem_sibling(&a.out, ".loss.csv");
    let stats_path = stem_sibling(&a.out, ".norm_stats.json");
    checkpoint.save(&a.out)?;
    save_loss_history(&history, &loss_path)?;
    stats.save_json(&stats_path)?;
    run.finish(
        &sibling(&a.out, ".manifest.json"),
        &[
            a.lowcost.clone(),
            a.reference.clone(),
            a.noise_params.clone(),
            a.config.clone(),
        ],
        &[a.out.clone(), loss_path, stats_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub input: PathBuf,
    pub input_sha256: String,
    pub seed: u64,
    pub stitch_mode: StitchMode,
    pub windows: usize,
    pub passthrough_samples: usize,
    pub warnings: Vec<String>,
}

pub fn generate(a: &GenerateArgs) -> CliResult<RunManifest> {
    let run = Run::new("generate", a, Some(a.seed));
    let lowcost = load_csv(&a.lowcost)?;
    let checkpoint = DenoiserCheckpoint::load(&a.checkpoint)?;
    let len = checkpoint.weights.config.window_len;
    let rate = checkpoint.noise_params.sample_rate_hz;
    if (lowcost.sample_rate_hz() - rate).abs() > 1e-6 * rate {
        return Err(CliError::usage(format!(
            "{}: sampled at {} Hz, checkpoint was trained at {rate} Hz",
            a.lowcost.display(),
            lowcost.sample_rate_hz()
        )));
    }
    if lowcost.len() < len {
        return Err(CliError::usage(format!(
            "{}: {} samples, shorter than the checkpoint window of {len}",
            a.lowcost.display(),
            lowcost.len()
        )));
    }
    let stitch_mode = match a.stitch {
        StitchArg::NonOverlapping => StitchMode::NonOverlapping,
        StitchArg::OverlapAverage => StitchMode::OverlapAverage {
            stride: a.stride.unwrap_or((len / 2).max(1)),
        },
    };
    if a.stride.is_some() && matches!(a.stitch, StitchArg::NonOverlapping) {
        log::warn!("--stride is ignored without --stitch overlap-average");
    }
    let cfg = SampleConfig {
        seed: a.seed,
        stitch_mode,
        batch_size: a.batch_size,
    };
    let out = generate_series(&lowcost, &checkpoint, &cfg)?;
    save_csv(&out.series, &a.out)?;
    let provenance = Provenance {
        schema_version: SCHEMA_VERSION,
        checkpoint: a.checkpoint.clone(),
        checkpoint_sha256: sha256_file(&a.checkpoint)?,
        input: a.lowcost.clone(),
        input_sha256: sha256_file(&a.lowcost)?,
        seed: a.seed,
        stitch_mode,
        windows: out.windows,
        passthrough_samples: out.passthrough,
        warnings: out.warnings,
    };
    let prov_path = sibling(&a.out, ".provenance.json");
    write_json(&prov_path, &provenance)?;
    run.finish(
        &sibling(&a.out, ".manifest.json"),
        &[a.lowcost.clone(), a.checkpoint.clone()],
        &[a.out.clone(), prov_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RmseReport {
    pub axes: Vec<String>,
    pub candidate: [f64; CHANNELS],
    pub baseline: [f64; CHANNELS],
    pub improvement_percent: [f64; CHANNELS],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NavReport {
    pub candidate: NavErrorStats,
    pub baseline: NavErrorStats,
    pub improvement: NavImprovement,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub samples: usize,
    pub duration_s: f64,
    /// RMSE of each series against the reference.
    pub rmse: RmseReport,
    pub navigation: NavReport,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<RunManifest> {
    let run = Run::new("evaluate", a, None);
    let candidate = load_csv(&a.candidate)?;
    let baseline = load_csv(&a.baseline)?;
    let reference = load_csv(&a.reference)?;
    check_paired(&candidate, &reference, "candidate/reference")?;
    check_paired(&baseline, &reference, "baseline/reference")?;
    let truth = load_nav_csv(&a.truth_nav)?;
    if truth.len() != candidate.len() {
        return Err(CliError::usage(format!(
            "truth navigation has {} states, IMU series have {} samples",
            truth.len(),
            candidate.len()
        )));
    }
    if (truth.times[0] - candidate.start_time_s()).abs() > 0.5 * candidate.dt() {
        return Err(CliError::usage(format!(
            "truth navigation starts at {} s, IMU series at {} s",
            truth.times[0],
            candidate.start_time_s()
        )));
    }

    let rc = rmse_per_axis(&candidate, &reference)?;
    let rb = rmse_per_axis(&baseline, &reference)?;
    let rmse = RmseReport {
        axes: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        candidate: rc,
        baseline: rb,
        improvement_percent: std::array::from_fn(|c| improvement_percent(rc[c], rb[c])),
    };

    let gravity = !a.no_gravity;
    let init = &truth.states[0];
    let sol_c = dead_reckon(&candidate, init, gravity)?;
    let sol_b = dead_reckon(&baseline, init, gravity)?;
    let stats_c = error_stats(&sol_c, &truth)?;
    let stats_b = error_stats(&sol_b, &truth)?;
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION,
        samples: candidate.len(),
        duration_s: candidate.len() as f64 * candidate.dt(),
        rmse,
        navigation: NavReport {
            candidate: stats_c,
            baseline: stats_b,
            improvement: nav_improvement(&stats_c, &stats_b),
        },
    };
    write_json(&a.out, &report)?;
    println!("{}", rmse_text(&report.rmse));
    println!(
        "{}",
        vimu_core::nav::comparison_table("candidate", &stats_c, "baseline", &stats_b)
    );

    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.series_dir {
        ensure_dir(dir)?;
        let err_c = error_series(&sol_c, &truth)?;
        let err_b = error_series(&sol_b, &truth)?;
        for (name, errs, sol) in [("candidate", &err_c, &sol_c), ("baseline", &err_b, &sol_b)] {
            let e = dir.join(format!("{name}_errors.csv"));
            let t = dir.join(format!("{name}_track.csv"));
            save_error_csv(&truth.times, errs, &e)?;
            save_track_csv(sol, &t)?;
            outputs.extend([e, t]);
        }
        let t = dir.join("truth_track.csv");
        save_track_csv(&truth, &t)?;
        outputs.push(t);
        if a.svg {
            let horizontal = |e: &[Vec<f64>; 6]| -> Vec<(f64, f64)> {
                truth
                    .times
                    .iter()
                    .enumerate()
                    .map(|(k, t)| (*t, e[0][k].hypot(e[1][k])))
                    .collect()
            };
            let lines = [
                plot::Line {
                    name: "candidate".into(),
                    points: horizontal(&err_c),
                },
                plot::Line {
                    name: "baseline".into(),
                    points: horizontal(&err_b),
                },
            ];
            let svg = plot::chart(
                &lines,
                &plot::Axes {
                    title: "Horizontal position error",
                    x_label: "t [s]",
                    y_label: "error [m]",
                    log_x: false,
                    log_y: false,
                },
            );
            let p = dir.join("horizontal_error.svg");
            write_atomic(&p, svg.as_bytes())?;
            outputs.push(p);
        }
    }
    run.finish(
        &sibling(&a.out, ".manifest.json"),
        &[
            a.candidate.clone(),
            a.baseline.clone(),
            a.reference.clone(),
            a.truth_nav.clone(),
        ],
        &outputs,
    )
}

pub fn rmse_text(r: &RmseReport) -> String {
    let mut s = format!(
        "{:<5} {:>12} {:>12} {:>9}\n",
        "axis", "candidate", "baseline", "improv. %"
    );
    for c in 0..CHANNELS {
        s += &format!(
            "{:<5} {:>12.4e} {:>12.4e} {:>9.1}\n",
            r.axes[c], r.candidate[c], r.baseline[c], r.improvement_percent[c]
        );
    }
    s
}
