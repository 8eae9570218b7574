//! Command-line front end for the data-grid access-profile simulator.
//!
//! Five stages cover the whole workflow: `simulate` replays a workload over
//! a topology and logs one row per completed transfer; `fit` regresses
//! transfer times on file size and concurrent traffic; `calibrate` runs the
//! likelihood-free inference pipeline stage by stage (training-set
//! generation, classifier training, posterior sampling, chain summary);
//! `closure` wires everything together as a self-consistency check against
//! a known ground-truth setting.
//!
//! Every command also accepts `--config FILE`, a JSON object holding the
//! same keys as the command's long flags; explicit flags win over file
//! values. All randomness flows from `--seed`, so a command re-run with the
//! same inputs and seed reproduces its outputs byte for byte. Next to its
//! outputs each command drops a manifest recording input digests, resolved
//! parameters and wall times.
//!
//! Exit codes: 0 on success, 2 for invalid inputs or flags, 3 for runtime
//! or numeric failures. Errors are a single machine-parsable line on stderr
//! of the form `dapsim: <kind> error: <detail>`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dapsim_core::analysis::{
    fit_origin_ols, fit_reduced_model, fit_transfer_model, read_observations,
    write_observations, AnalysisError, Observation, RegressionFit,
};
use dapsim_core::calibration::mcmc::{
    proposal_scales, read_chain_csv, sample_posterior, summarize, write_chain_csv,
    write_summary_json, MarkovChain,
};
use dapsim_core::calibration::{
    generate_training_set, read_training_csv, train_calibrator, write_training_csv,
    CalibrationError, CalibratorBundle, PriorBox, SimulationStudy, SimulatorSetting,
    DEFAULT_BATCH, DEFAULT_DIMS, DEFAULT_LR, DEFAULT_PROPOSAL_FRAC,
};
use dapsim_core::closure::{run_closure, ClosureSpec};
use dapsim_core::config::{PriorConfig, SettingFile, TopologyConfig, WorkloadConfig};
use dapsim_core::engine::{run, RunOptions};
use dapsim_core::grid::Grid;
use dapsim_core::workload::{materialize, Workload};

const DEFAULT_SEED: u64 = 1;
const DEFAULT_HORIZON: u64 = 100_000;
const DEFAULT_N_TRAIN: usize = 50_000;
const DEFAULT_EPOCHS: usize = 30;
const DEFAULT_SAMPLES: usize = 20_000;
const DEFAULT_BURN_IN: usize = 2_000;
const DEFAULT_RESIM: usize = 100;

// ---------------------------------------------------------------------------
// Errors and exit codes.

#[derive(Debug)]
enum CliError {
    /// Bad flags, unreadable or inconsistent input files. Exit code 2.
    Validation(String),
    /// Failures while computing or writing outputs. Exit code 3.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn invalid(err: impl fmt::Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn failed(err: impl fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// Calibration errors raised while producing outputs: configuration
/// problems stay validation errors, everything else is a runtime failure.
fn calibration_failed(err: CalibrationError) -> CliError {
    match err {
        CalibrationError::Invalid(_) | CalibrationError::Sim(_) => invalid(err),
        other => failed(other),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| {
        CliError::Validation(format!("missing required value for --{flag} (flag or config)"))
    })
}

fn positive_count(value: usize, flag: &str) -> Result<usize, CliError> {
    if value == 0 {
        return Err(CliError::Validation(format!("--{flag} must be at least 1")));
    }
    Ok(value)
}

fn positive_tick(value: u64, flag: &str) -> Result<u64, CliError> {
    if value == 0 {
        return Err(CliError::Validation(format!("--{flag} must be at least 1")));
    }
    Ok(value)
}

fn positive_real(value: f64, flag: &str) -> Result<f64, CliError> {
    if !value.is_finite() || value <= 0.0 {
        return Err(CliError::Validation(format!(
            "--{flag} must be a positive finite number, got {value}"
        )));
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Run manifests.

#[derive(Serialize)]
struct InputRecord {
    role: String,
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    params: serde_json::Value,
    outputs: Vec<String>,
    started_utc: String,
    finished_utc: String,
}

/// Collects inputs and outputs while a command runs, then persists the
/// manifest as the command's last write.
struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    params: serde_json::Value,
    outputs: Vec<String>,
    started_utc: String,
}

fn now_utc() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_owned(),
            seed: None,
            inputs: Vec::new(),
            params: serde_json::Value::Null,
            outputs: Vec::new(),
            started_utc: now_utc(),
        }
    }

    fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    fn params(&mut self, params: serde_json::Value) {
        self.params = params;
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Validation(format!("cannot read {role} file `{}`: {e}", path.display()))
        })?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.inputs.push(InputRecord {
            role: role.to_owned(),
            path: path.display().to_string(),
            sha256: format!("{:x}", hasher.finalize()),
        });
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(self, path: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "dapsim",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.seed,
            inputs: self.inputs,
            params: self.params,
            outputs: self.outputs,
            started_utc: self.started_utc,
            finished_utc: now_utc(),
        };
        let file = std::fs::File::create(path)
            .map_err(|e| failed(format!("cannot create `{}`: {e}", path.display())))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)
            .map_err(failed)?;
        Ok(())
    }
}

/// Manifest location for a command whose output is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

// ---------------------------------------------------------------------------
// Shared plumbing.

fn load_overlay<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::Validation(format!("cannot read config file `{}`: {e}", path.display()))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Validation(format!("config file `{}`: {e}", path.display()))
    })
}

fn load_grid(path: &Path) -> Result<Grid, CliError> {
    let cfg = TopologyConfig::load(path).map_err(invalid)?;
    Grid::build(&cfg).map_err(invalid)
}

fn load_workload(path: &Path, seed: u64) -> Result<Workload, CliError> {
    let cfg = WorkloadConfig::load(path).map_err(invalid)?;
    materialize(&cfg, seed).map_err(invalid)
}

fn load_prior(path: &Path) -> Result<PriorBox, CliError> {
    let cfg = PriorConfig::load(path).map_err(invalid)?;
    PriorBox::from_config(&cfg).map_err(invalid)
}

fn check_dims(dims: &[usize]) -> Result<(), CliError> {
    let ok = dims.len() >= 2
        && dims[0] == 6
        && *dims.last().unwrap() == 1
        && dims.iter().all(|&d| d >= 1);
    if !ok {
        return Err(CliError::Validation(format!(
            "--dims must run from 6 inputs to 1 output with non-empty layers, got {dims:?}"
        )));
    }
    Ok(())
}

fn scoped_links(links: Vec<String>) -> Option<Vec<String>> {
    if links.is_empty() {
        None
    } else {
        Some(links)
    }
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| failed(format!("cannot create `{}`: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// Argument surface.

#[derive(Parser)]
#[command(
    name = "dapsim",
    version,
    about = "Simulate data-access profiles over a data grid and calibrate the \
             simulator against observed transfer-time regressions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a workload over a topology and log per-transfer observations.
    Simulate(SimulateArgs),
    /// Fit the origin-constrained transfer-time regression to observations.
    Fit(FitArgs),
    /// Likelihood-free calibration pipeline, one stage per subcommand.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// End-to-end self-consistency check against a known ground truth.
    Closure(ClosureArgs),
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Simulate prior draws and write the (setting, coefficients) table.
    Gen(GenArgs),
    /// Train the ratio classifier on a generated training table.
    Train(TrainArgs),
    /// Sample the posterior chain at an observed coefficient vector.
    Sample(SampleArgs),
    /// Summarise a sampled chain into mode, median and acceptance rate.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Topology description (data centres, links, protocols).
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Workload description (replay list or generator).
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Optional overrides for protocol overhead and background load.
    #[arg(long)]
    setting: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// First tick that is no longer simulated.
    #[arg(long)]
    horizon: Option<u64>,
    /// Output directory; receives observations.csv and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-tick events.log next to the observations.
    #[arg(long)]
    events: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimulateOverlay {
    topology: Option<PathBuf>,
    workload: Option<PathBuf>,
    setting: Option<PathBuf>,
    seed: Option<u64>,
    horizon: Option<u64>,
    out: Option<PathBuf>,
    events: Option<bool>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// T = a*S + b*ConTh + c*ConPr (threaded profiles).
    Eq1,
    /// T = a*S + c*ConPr (single-threaded profiles).
    Eq2,
}

impl ModelKind {
    fn names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Eq1 => &["S", "ConTh", "ConPr"],
            ModelKind::Eq2 => &["S", "ConPr"],
        }
    }

    fn label(self) -> &'static str {
        match self {
            ModelKind::Eq1 => "eq1",
            ModelKind::Eq2 => "eq2",
        }
    }

    fn fit(self, obs: &[Observation]) -> Result<RegressionFit, AnalysisError> {
        match self {
            ModelKind::Eq1 => fit_transfer_model(obs),
            ModelKind::Eq2 => fit_reduced_model(obs),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation CSV produced by `dapsim simulate`.
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Regression to fit: eq1 keeps the sibling-thread term, eq2 drops it.
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Fit per start-tick window of this width instead of one global fit.
    #[arg(long)]
    window: Option<u64>,
    /// Output JSON document.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FitOverlay {
    observations: Option<PathBuf>,
    model: Option<String>,
    window: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Uniform prior box over (overhead, mu, sigma).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Number of prior draws to simulate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Worker threads for the simulation waves (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Restrict the overhead override to this protocol.
    #[arg(long)]
    protocol: Option<String>,
    /// Restrict the background override to these `src->dst` links.
    #[arg(long, value_delimiter = ',')]
    links: Vec<String>,
    /// Output training CSV (overhead,mu,sigma,a,b,c).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenOverlay {
    topology: Option<PathBuf>,
    workload: Option<PathBuf>,
    prior: Option<PathBuf>,
    n: Option<usize>,
    seed: Option<u64>,
    horizon: Option<u64>,
    jobs: Option<usize>,
    protocol: Option<String>,
    links: Option<Vec<String>>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training CSV from `dapsim calibrate gen`.
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Layer widths from 6 inputs to 1 logit, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output classifier bundle (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainOverlay {
    training: Option<PathBuf>,
    prior: Option<PathBuf>,
    dims: Option<Vec<usize>>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classifier bundle from `dapsim calibrate train`.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Observed eq1 fit from `dapsim fit` (supplies the coefficient vector).
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Post burn-in states to keep.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_name = "N")]
    burn_in: Option<usize>,
    /// Per-axis proposal standard deviation as a fraction of the prior range.
    #[arg(long, value_name = "F")]
    proposal_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output chain CSV (overhead,mu,sigma); acceptance metadata lands in
    /// `<out>.meta.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SampleOverlay {
    bundle: Option<PathBuf>,
    fit: Option<PathBuf>,
    samples: Option<usize>,
    burn_in: Option<usize>,
    proposal_frac: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chain CSV from `dapsim calibrate sample`.
    #[arg(long)]
    chain: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Acceptance metadata; defaults to `<chain>.meta.json` when present.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Output summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SummarizeOverlay {
    chain: Option<PathBuf>,
    prior: Option<PathBuf>,
    meta: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClosureArgs {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Ground-truth setting JSON {"overhead": .., "mu": .., "sigma": ..}.
    #[arg(long)]
    theta_true: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_name = "N")]
    burn_in: Option<usize>,
    #[arg(long, value_name = "F")]
    proposal_frac: Option<f64>,
    /// Re-simulations per candidate when scoring coefficient recovery.
    #[arg(long)]
    resim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long, value_delimiter = ',')]
    links: Vec<String>,
    /// Output directory; receives closure.json, closure.txt, manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ClosureOverlay {
    topology: Option<PathBuf>,
    workload: Option<PathBuf>,
    prior: Option<PathBuf>,
    theta_true: Option<PathBuf>,
    n_train: Option<usize>,
    dims: Option<Vec<usize>>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    samples: Option<usize>,
    burn_in: Option<usize>,
    proposal_frac: Option<f64>,
    resim: Option<usize>,
    seed: Option<u64>,
    horizon: Option<u64>,
    protocol: Option<String>,
    links: Option<Vec<String>>,
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let overlay: SimulateOverlay = load_overlay(args.config.as_deref())?;
    let topology = require(args.topology.or(overlay.topology), "topology")?;
    let workload = require(args.workload.or(overlay.workload), "workload")?;
    let setting_path = args.setting.or(overlay.setting);
    let seed = args.seed.or(overlay.seed).unwrap_or(DEFAULT_SEED);
    let horizon =
        positive_tick(args.horizon.or(overlay.horizon).unwrap_or(DEFAULT_HORIZON), "horizon")?;
    let out = require(args.out.or(overlay.out), "out")?;
    let events = args.events || overlay.events.unwrap_or(false);

    let mut manifest = ManifestBuilder::new("simulate");
    manifest.seed(seed);
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("topology", &topology)?;
    manifest.input("workload", &workload)?;

    let grid = load_grid(&topology)?;
    let jobs = load_workload(&workload, seed)?;
    let setting = match &setting_path {
        Some(path) => {
            manifest.input("setting", path)?;
            Some(SettingFile::load(path).map_err(invalid)?.to_applied())
        }
        None => None,
    };

    let opts = RunOptions { seed, horizon, record_events: events };
    let result = run(&grid, &jobs, setting.as_ref(), &opts).map_err(invalid)?;

    create_out_dir(&out)?;
    let obs_path = out.join("observations.csv");
    write_observations(&obs_path, &result.observations).map_err(failed)?;
    manifest.output(&obs_path);

    if events {
        let log_path = out.join("events.log");
        let mut body = String::new();
        for event in &result.events {
            body.push_str(&event.to_string());
            body.push('\n');
        }
        std::fs::write(&log_path, body)
            .map_err(|e| failed(format!("cannot write `{}`: {e}", log_path.display())))?;
        manifest.output(&log_path);
    }

    manifest.params(serde_json::json!({
        "seed": seed,
        "horizon": horizon,
        "events": events,
    }));
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;

    println!(
        "wrote {} observations to {} (end tick {}, {} jobs completed, {} failed, {} unfinished)",
        result.observations.len(),
        obs_path.display(),
        result.end_tick,
        result.jobs_completed,
        result.jobs_failed.len(),
        result.jobs_unfinished,
    );
    for (job, reason) in &result.jobs_failed {
        println!("job {job} failed: {reason}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct WindowDoc {
    window_start: u64,
    window_end: u64,
    n: usize,
    /// `null` when the window holds too few rows or a degenerate design.
    fit: Option<RegressionFit>,
}

#[derive(Serialize)]
struct WindowSeries {
    model: &'static str,
    window_ticks: u64,
    windows: Vec<WindowDoc>,
}

fn fit_window(
    obs: &[Observation],
    model: ModelKind,
) -> Result<Option<RegressionFit>, CliError> {
    let rows: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| match model {
            ModelKind::Eq1 => vec![o.s_mb, o.conth_mb, o.conpr_mb],
            ModelKind::Eq2 => vec![o.s_mb, o.conpr_mb],
        })
        .collect();
    let y: Vec<f64> = obs.iter().map(|o| o.t_ticks as f64).collect();
    match fit_origin_ols(&rows, &y, model.names()) {
        Ok(fit) => Ok(Some(fit)),
        Err(AnalysisError::NotEnoughData { .. }) | Err(AnalysisError::Degenerate(_)) => Ok(None),
        Err(err) => Err(failed(err)),
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let overlay: FitOverlay = load_overlay(args.config.as_deref())?;
    let observations = require(args.observations.or(overlay.observations), "observations")?;
    let model = match (args.model, overlay.model.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => ModelKind::from_str(s, true)
            .map_err(|_| CliError::Validation(format!("unknown model `{s}` (use eq1 or eq2)")))?,
        (None, None) => return Err(CliError::Validation("missing required value for --model (flag or config)".into())),
    };
    let window = args.window.or(overlay.window);
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("fit");
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("observations", &observations)?;

    let obs = read_observations(&observations).map_err(invalid)?;

    let body = match window {
        None => {
            let fit = model.fit(&obs).map_err(|e| match e {
                AnalysisError::NotEnoughData { .. } | AnalysisError::Csv(_) => invalid(e),
                other => failed(other),
            })?;
            let pairs: Vec<String> = fit
                .names
                .iter()
                .zip(&fit.coefficients)
                .map(|(n, c)| format!("{n}={c:.6e}"))
                .collect();
            println!(
                "{} fit over {} observations: {} (R2 {:.6})",
                model.label(),
                fit.n,
                pairs.join(" "),
                fit.r_squared,
            );
            serde_json::to_string_pretty(&fit).map_err(failed)?
        }
        Some(width) => {
            let width = positive_tick(width, "window")?;
            if obs.is_empty() {
                return Err(CliError::Validation(format!(
                    "`{}` holds no observations to fit",
                    observations.display()
                )));
            }
            let bucket = |o: &Observation| o.start_tick / width;
            let lo = obs.iter().map(bucket).min().unwrap();
            let hi = obs.iter().map(bucket).max().unwrap();
            let mut windows = Vec::new();
            for b in lo..=hi {
                let rows: Vec<Observation> =
                    obs.iter().filter(|o| bucket(o) == b).cloned().collect();
                let fit = fit_window(&rows, model)?;
                windows.push(WindowDoc {
                    window_start: b * width,
                    window_end: (b + 1) * width,
                    n: rows.len(),
                    fit,
                });
            }
            let fitted = windows.iter().filter(|w| w.fit.is_some()).count();
            println!(
                "{} fit over {} windows of {} ticks ({} with enough data)",
                model.label(),
                windows.len(),
                width,
                fitted,
            );
            let series = WindowSeries { model: model.label(), window_ticks: width, windows };
            serde_json::to_string_pretty(&series).map_err(failed)?
        }
    };

    std::fs::write(&out, body)
        .map_err(|e| failed(format!("cannot write `{}`: {e}", out.display())))?;
    manifest.output(&out);
    manifest.params(serde_json::json!({
        "model": model.label(),
        "window": window,
    }));
    manifest.write(&sibling_manifest(&out))?;
    println!("wrote fit to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate gen

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let overlay: GenOverlay = load_overlay(args.config.as_deref())?;
    let topology = require(args.topology.or(overlay.topology), "topology")?;
    let workload = require(args.workload.or(overlay.workload), "workload")?;
    let prior_path = require(args.prior.or(overlay.prior), "prior")?;
    let n = positive_count(require(args.n.or(overlay.n), "n")?, "n")?;
    let seed = args.seed.or(overlay.seed).unwrap_or(DEFAULT_SEED);
    let horizon =
        positive_tick(args.horizon.or(overlay.horizon).unwrap_or(DEFAULT_HORIZON), "horizon")?;
    let jobs = match args.jobs.or(overlay.jobs) {
        Some(j) => Some(positive_count(j, "jobs")?),
        None => None,
    };
    let protocol = args.protocol.or(overlay.protocol);
    let links = if args.links.is_empty() { overlay.links.unwrap_or_default() } else { args.links };
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("calibrate gen");
    manifest.seed(seed);
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("topology", &topology)?;
    manifest.input("workload", &workload)?;
    manifest.input("prior", &prior_path)?;

    let grid = load_grid(&topology)?;
    let jobs_list = load_workload(&workload, seed)?;
    let prior = load_prior(&prior_path)?;
    let study = SimulationStudy {
        grid: &grid,
        workload: &jobs_list,
        protocol: protocol.clone(),
        links: scoped_links(links.clone()),
        horizon,
    };

    let tuples = match jobs {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(failed)?;
            pool.install(|| generate_training_set(&study, &prior, n, seed))
        }
        None => generate_training_set(&study, &prior, n, seed),
    }
    .map_err(calibration_failed)?;

    write_training_csv(&out, &tuples).map_err(failed)?;
    manifest.output(&out);
    manifest.params(serde_json::json!({
        "n": n,
        "seed": seed,
        "horizon": horizon,
        "jobs": jobs,
        "protocol": protocol,
        "links": links,
    }));
    manifest.write(&sibling_manifest(&out))?;
    println!("wrote {} training rows to {}", tuples.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate train

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let overlay: TrainOverlay = load_overlay(args.config.as_deref())?;
    let training = require(args.training.or(overlay.training), "training")?;
    let prior_path = require(args.prior.or(overlay.prior), "prior")?;
    let dims = if args.dims.is_empty() {
        overlay.dims.unwrap_or_else(|| DEFAULT_DIMS.to_vec())
    } else {
        args.dims
    };
    check_dims(&dims)?;
    let epochs =
        positive_count(args.epochs.or(overlay.epochs).unwrap_or(DEFAULT_EPOCHS), "epochs")?;
    let batch = args.batch.or(overlay.batch).unwrap_or(DEFAULT_BATCH);
    if batch < 2 {
        return Err(CliError::Validation(
            "--batch must be at least 2 so each minibatch can hold a shifted control".into(),
        ));
    }
    let lr = positive_real(args.lr.or(overlay.lr).unwrap_or(DEFAULT_LR), "lr")?;
    let seed = args.seed.or(overlay.seed).unwrap_or(DEFAULT_SEED);
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("calibrate train");
    manifest.seed(seed);
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("training", &training)?;
    manifest.input("prior", &prior_path)?;

    let tuples = read_training_csv(&training).map_err(invalid)?;
    if tuples.len() < 2 {
        return Err(CliError::Validation(format!(
            "`{}` holds {} training rows; need at least 2 to build controls",
            training.display(),
            tuples.len()
        )));
    }
    let prior = load_prior(&prior_path)?;

    let (bundle, report) = train_calibrator(&tuples, &prior, &dims, epochs, batch, lr, seed);
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}/{}: loss {loss:.6}", i + 1, epochs);
    }

    bundle.save(&out).map_err(failed)?;
    manifest.output(&out);
    manifest.params(serde_json::json!({
        "dims": dims,
        "epochs": epochs,
        "batch": batch,
        "lr": lr,
        "seed": seed,
        "rows": tuples.len(),
    }));
    manifest.write(&sibling_manifest(&out))?;
    println!("saved classifier bundle to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate sample

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    acceptance_rate: f64,
    burn_in: usize,
    n_samples: usize,
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let overlay: SampleOverlay = load_overlay(args.config.as_deref())?;
    let bundle_path = require(args.bundle.or(overlay.bundle), "bundle")?;
    let fit_path = require(args.fit.or(overlay.fit), "fit")?;
    let samples =
        positive_count(args.samples.or(overlay.samples).unwrap_or(DEFAULT_SAMPLES), "samples")?;
    let burn_in = args.burn_in.or(overlay.burn_in).unwrap_or(DEFAULT_BURN_IN);
    let frac = positive_real(
        args.proposal_frac.or(overlay.proposal_frac).unwrap_or(DEFAULT_PROPOSAL_FRAC),
        "proposal-frac",
    )?;
    let seed = args.seed.or(overlay.seed).unwrap_or(DEFAULT_SEED);
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("calibrate sample");
    manifest.seed(seed);
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("bundle", &bundle_path)?;
    manifest.input("fit", &fit_path)?;

    let bundle = CalibratorBundle::load(&bundle_path).map_err(invalid)?;
    let fit_bytes = std::fs::read(&fit_path).map_err(|e| {
        CliError::Validation(format!("cannot read fit file `{}`: {e}", fit_path.display()))
    })?;
    let fit: RegressionFit = serde_json::from_slice(&fit_bytes)
        .map_err(|e| CliError::Validation(format!("fit file `{}`: {e}", fit_path.display())))?;
    if fit.coefficients.len() != 3 {
        return Err(CliError::Validation(format!(
            "fit file `{}` carries {} coefficients; sampling needs the 3-coefficient eq1 fit",
            fit_path.display(),
            fit.coefficients.len()
        )));
    }
    let x_obs = [fit.coefficients[0], fit.coefficients[1], fit.coefficients[2]];

    let scales = proposal_scales(&bundle.prior, frac);
    let chain = sample_posterior(&bundle, &x_obs, samples, burn_in, &scales, seed);

    write_chain_csv(&out, &chain.states).map_err(failed)?;
    manifest.output(&out);
    let meta_path = PathBuf::from(format!("{}.meta.json", out.display()));
    let meta = SampleMeta {
        acceptance_rate: chain.acceptance_rate,
        burn_in: chain.burn_in,
        n_samples: chain.states.len(),
    };
    let meta_body = serde_json::to_string_pretty(&meta).map_err(failed)?;
    std::fs::write(&meta_path, meta_body)
        .map_err(|e| failed(format!("cannot write `{}`: {e}", meta_path.display())))?;
    manifest.output(&meta_path);

    manifest.params(serde_json::json!({
        "samples": samples,
        "burn_in": burn_in,
        "proposal_frac": frac,
        "seed": seed,
        "x_obs": x_obs,
    }));
    manifest.write(&sibling_manifest(&out))?;
    println!(
        "wrote {} posterior samples to {} (acceptance rate {:.3})",
        chain.states.len(),
        out.display(),
        chain.acceptance_rate,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate summarize

fn cmd_summarize(args: SummarizeArgs) -> Result<(), CliError> {
    let overlay: SummarizeOverlay = load_overlay(args.config.as_deref())?;
    let chain_path = require(args.chain.or(overlay.chain), "chain")?;
    let prior_path = require(args.prior.or(overlay.prior), "prior")?;
    let meta_path = args.meta.or(overlay.meta);
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("calibrate summarize");
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("chain", &chain_path)?;
    manifest.input("prior", &prior_path)?;

    let states = read_chain_csv(&chain_path).map_err(invalid)?;
    if states.is_empty() {
        return Err(CliError::Validation(format!(
            "chain file `{}` holds no samples",
            chain_path.display()
        )));
    }
    let prior = load_prior(&prior_path)?;

    // Acceptance rate lives beside the chain, not in it; without metadata the
    // summary reports it as null.
    let default_meta = PathBuf::from(format!("{}.meta.json", chain_path.display()));
    let resolved_meta = match meta_path {
        Some(p) => Some(p),
        None if default_meta.exists() => Some(default_meta),
        None => None,
    };
    let (acceptance_rate, burn_in) = match &resolved_meta {
        Some(path) => {
            manifest.input("meta", path)?;
            let bytes = std::fs::read(path).map_err(|e| {
                CliError::Validation(format!("cannot read meta file `{}`: {e}", path.display()))
            })?;
            let meta: SampleMeta = serde_json::from_slice(&bytes).map_err(|e| {
                CliError::Validation(format!("meta file `{}`: {e}", path.display()))
            })?;
            (meta.acceptance_rate, meta.burn_in)
        }
        None => (f64::NAN, 0),
    };

    let chain = MarkovChain { states, burn_in, acceptance_rate };
    let summary = summarize(&chain, &prior);
    write_summary_json(&out, &summary).map_err(failed)?;
    manifest.output(&out);
    manifest.params(serde_json::json!({
        "meta": resolved_meta.as_ref().map(|p| p.display().to_string()),
    }));
    manifest.write(&sibling_manifest(&out))?;

    println!(
        "mode overhead={:.5} mu={:.3} sigma={:.3}",
        summary.mode[0], summary.mode[1], summary.mode[2]
    );
    println!(
        "median overhead={:.5} mu={:.3} sigma={:.3}",
        summary.median[0], summary.median[1], summary.median[2]
    );
    println!("wrote summary to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// closure

fn cmd_closure(args: ClosureArgs) -> Result<(), CliError> {
    let overlay: ClosureOverlay = load_overlay(args.config.as_deref())?;
    let topology = require(args.topology.or(overlay.topology), "topology")?;
    let workload = require(args.workload.or(overlay.workload), "workload")?;
    let prior_path = require(args.prior.or(overlay.prior), "prior")?;
    let theta_path = require(args.theta_true.or(overlay.theta_true), "theta-true")?;
    let n_train =
        positive_count(args.n_train.or(overlay.n_train).unwrap_or(DEFAULT_N_TRAIN), "n-train")?;
    let dims = if args.dims.is_empty() {
        overlay.dims.unwrap_or_else(|| DEFAULT_DIMS.to_vec())
    } else {
        args.dims
    };
    check_dims(&dims)?;
    let epochs =
        positive_count(args.epochs.or(overlay.epochs).unwrap_or(DEFAULT_EPOCHS), "epochs")?;
    let batch = args.batch.or(overlay.batch).unwrap_or(DEFAULT_BATCH);
    if batch < 2 {
        return Err(CliError::Validation(
            "--batch must be at least 2 so each minibatch can hold a shifted control".into(),
        ));
    }
    let lr = positive_real(args.lr.or(overlay.lr).unwrap_or(DEFAULT_LR), "lr")?;
    let samples =
        positive_count(args.samples.or(overlay.samples).unwrap_or(DEFAULT_SAMPLES), "samples")?;
    let burn_in = args.burn_in.or(overlay.burn_in).unwrap_or(DEFAULT_BURN_IN);
    let frac = positive_real(
        args.proposal_frac.or(overlay.proposal_frac).unwrap_or(DEFAULT_PROPOSAL_FRAC),
        "proposal-frac",
    )?;
    let resim = positive_count(args.resim.or(overlay.resim).unwrap_or(DEFAULT_RESIM), "resim")?;
    let seed = args.seed.or(overlay.seed).unwrap_or(DEFAULT_SEED);
    let horizon =
        positive_tick(args.horizon.or(overlay.horizon).unwrap_or(DEFAULT_HORIZON), "horizon")?;
    let protocol = args.protocol.or(overlay.protocol);
    let links = if args.links.is_empty() { overlay.links.unwrap_or_default() } else { args.links };
    let out = require(args.out.or(overlay.out), "out")?;

    let mut manifest = ManifestBuilder::new("closure");
    manifest.seed(seed);
    if let Some(cfg) = args.config.as_deref() {
        manifest.input("config", cfg)?;
    }
    manifest.input("topology", &topology)?;
    manifest.input("workload", &workload)?;
    manifest.input("prior", &prior_path)?;
    manifest.input("theta-true", &theta_path)?;

    let grid = load_grid(&topology)?;
    let jobs_list = load_workload(&workload, seed)?;
    let prior = load_prior(&prior_path)?;
    let theta_bytes = std::fs::read(&theta_path).map_err(|e| {
        CliError::Validation(format!("cannot read setting file `{}`: {e}", theta_path.display()))
    })?;
    let theta: SimulatorSetting = serde_json::from_slice(&theta_bytes).map_err(|e| {
        CliError::Validation(format!("setting file `{}`: {e}", theta_path.display()))
    })?;
    let theta_true = [theta.overhead, theta.mu, theta.sigma];
    if !prior.contains(&theta_true) {
        eprintln!(
            "warning: ground truth ({}, {}, {}) lies outside the prior box; \
             the posterior cannot reach it",
            theta_true[0], theta_true[1], theta_true[2]
        );
    }

    let spec = ClosureSpec {
        study: SimulationStudy {
            grid: &grid,
            workload: &jobs_list,
            protocol: protocol.clone(),
            links: scoped_links(links.clone()),
            horizon,
        },
        prior,
        theta_true,
        n_train,
        dims: dims.clone(),
        epochs,
        batch,
        lr,
        n_samples: samples,
        burn_in,
        proposal_frac: frac,
        n_resim: resim,
        seed,
    };
    let report = run_closure(&spec).map_err(calibration_failed)?;
    let table = report.render_table();
    print!("{table}");

    create_out_dir(&out)?;
    let json_path = out.join("closure.json");
    let json_body = serde_json::to_string_pretty(&report).map_err(failed)?;
    std::fs::write(&json_path, json_body)
        .map_err(|e| failed(format!("cannot write `{}`: {e}", json_path.display())))?;
    manifest.output(&json_path);
    let table_path = out.join("closure.txt");
    std::fs::write(&table_path, table)
        .map_err(|e| failed(format!("cannot write `{}`: {e}", table_path.display())))?;
    manifest.output(&table_path);

    manifest.params(serde_json::json!({
        "n_train": n_train,
        "dims": dims,
        "epochs": epochs,
        "batch": batch,
        "lr": lr,
        "samples": samples,
        "burn_in": burn_in,
        "proposal_frac": frac,
        "resim": resim,
        "seed": seed,
        "horizon": horizon,
        "protocol": protocol,
        "links": links,
    }));
    manifest.write(&out.join("manifest.json"))?;
    println!("wrote closure report to {}", json_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Calibrate(CalibrateCommand::Gen(args)) => cmd_gen(args),
        Command::Calibrate(CalibrateCommand::Train(args)) => cmd_train(args),
        Command::Calibrate(CalibrateCommand::Sample(args)) => cmd_sample(args),
        Command::Calibrate(CalibrateCommand::Summarize(args)) => cmd_summarize(args),
        Command::Closure(args) => cmd_closure(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("dapsim: {err}");
            ExitCode::from(err.code())
        }
    }
}
