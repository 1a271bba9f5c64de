//! `tse`: reconstruct complete traffic-speed fields from sparse probe
//! trajectories.
//!
//! Subcommands cover the full pipeline: `ingest` turns trajectory CSVs into
//! gridded speed fields, `split` samples probe vehicles, `impute` completes
//! a field with one of the three methods, `evaluate`/`cep` score and
//! diagnose, `trial` runs the repeated-seed experiment, and `synth` builds
//! reproducible synthetic instances. Exit codes: 0 success, 1 I/O or input
//! data problems, 2 invalid configuration, 3 hit the iteration cap without
//! converging (outputs are still written).

mod artifacts;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tse_core::ndarray::Array2;

use artifacts::{write_atomic, ManifestBuilder};
use tse_core::config::{impute, Method, RunConfig};
use tse_core::eval::{
    align_onto, cep, run_trials, score, synth, write_cep_csv, SyntheticSpec, TrialOptions,
};
use tse_core::fmt::sig9;
use tse_core::grid::{
    aggregate, read_grid_csv, read_mask_csv, read_trajectory_csv, split_trajectories,
    trim_empty_borders, write_grid_csv, write_mask_csv, SpeedField,
};
use tse_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tse",
    version,
    about = "Traffic-speed field reconstruction from sparse trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate trajectory records into a gridded speed field
    Ingest(IngestArgs),
    /// Sample a train/test vehicle split
    Split(SplitArgs),
    /// Complete a sparse field with one method
    Impute(ImputeArgs),
    /// Score an imputed field against ground truth
    Evaluate(EvaluateArgs),
    /// Repeat split/impute/score over derived seeds for several methods
    Trial(TrialArgs),
    /// Cumulative singular-value percentage of a complete field
    Cep(CepArgs),
    /// Generate a synthetic ground-truth/training pair
    Synth(SynthArgs),
}

/// Solver settings; flags override config-file keys, which override the
/// built-in defaults.
#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Spatial window in cells
    #[arg(long)]
    tau_s: Option<usize>,
    /// Temporal window in cells
    #[arg(long)]
    tau_t: Option<usize>,
    /// Initial ADMM penalty
    #[arg(long)]
    rho0: Option<f64>,
    /// Penalty ceiling
    #[arg(long)]
    rho_max: Option<f64>,
    /// Penalty growth factor, in [1, 1.2]
    #[arg(long)]
    beta: Option<f64>,
    /// Relative-change stopping tolerance
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of leading singular values left unpenalized
    #[arg(long)]
    truncation_r: Option<usize>,
    /// Iteration cap
    #[arg(long)]
    max_iters: Option<usize>,
    /// Base seed for sampling commands
    #[arg(long)]
    seed: Option<u64>,
    /// Total-variation weight (mftv)
    #[arg(long)]
    gamma: Option<f64>,
    /// Four comma-separated mode weights (sth-snn)
    #[arg(long, value_parser = parse_alphas)]
    alphas: Option<Alphas>,
    /// Start from a mean-filled field instead of zeros
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mean_fill_warm_start: Option<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Alphas([f64; 4]);

fn parse_alphas(s: &str) -> std::result::Result<Alphas, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!(
            "expected four comma-separated weights, got {}",
            parts.len()
        ));
    }
    let mut weights = [0.0; 4];
    for (slot, part) in weights.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad weight {part:?}: {e}"))?;
    }
    Ok(Alphas(weights))
}

impl ConfigOverrides {
    fn effective(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::from_json_reader(BufReader::new(File::open(path)?))?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            tau_s: self.tau_s,
            tau_t: self.tau_t,
            rho0: self.rho0,
            rho_max: self.rho_max,
            beta: self.beta,
            epsilon: self.epsilon,
            truncation_r: self.truncation_r,
            max_iters: self.max_iters,
            seed: self.seed,
            gamma: self.gamma,
            alphas: self.alphas.map(|a| a.0),
            mean_fill_warm_start: self.mean_fill_warm_start,
        };
        Ok(flags.merged_over(&base))
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Trajectory CSV (vehicle_id,time_s,position_ft,speed_fts)
    #[arg(long)]
    trajectories: PathBuf,
    /// Spatial resolution, feet
    #[arg(long)]
    ls: f64,
    /// Temporal resolution, seconds
    #[arg(long)]
    lt: f64,
    /// Keep only these vehicles (one id per line)
    #[arg(long)]
    vehicles: Option<PathBuf>,
    #[arg(long)]
    out_grid: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    trajectories: PathBuf,
    /// Probe fraction in (0, 1]
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output: one train vehicle id per line
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    /// sth-lrtc, mftv, or sth-snn
    #[arg(long)]
    method: String,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    ls: f64,
    #[arg(long, default_value_t = 5.0)]
    lt: f64,
    /// Completed grid CSV
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration convergence trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth grid CSV (empty cells = unobserved)
    #[arg(long)]
    truth: PathBuf,
    /// Completed grid CSV
    #[arg(long)]
    imputed: PathBuf,
    /// Mask CSV of training observations
    #[arg(long)]
    train_mask: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    ls: f64,
    #[arg(long, default_value_t = 5.0)]
    lt: f64,
    /// Metrics JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    n_trials: usize,
    /// Comma-separated method list
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 10.0)]
    ls: f64,
    #[arg(long, default_value_t = 5.0)]
    lt: f64,
    /// Parallel trial workers
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-method report JSON
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct CepArgs {
    /// Complete grid CSV
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    ls: f64,
    #[arg(long, default_value_t = 5.0)]
    lt: f64,
    /// `k,cep` CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// SyntheticSpec JSON
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_train_mask: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            if err.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Split(args) => cmd_split(args),
        Command::Impute(args) => cmd_impute(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Trial(args) => cmd_trial(args),
        Command::Cep(args) => cmd_cep(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(BufReader::new(file))
}

fn read_vehicle_ids(path: &Path) -> Result<BTreeSet<u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse().map_err(|e| Error::Parse {
            row: idx + 1,
            reason: format!("bad vehicle id {line:?}: {e}"),
        })?;
        ids.insert(id);
    }
    Ok(ids)
}

fn cmd_ingest(args: IngestArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.trajectories)?;
    let records = read_trajectory_csv(open(&args.trajectories)?)?;
    let filter = match &args.vehicles {
        Some(path) => {
            manifest.input(path)?;
            Some(read_vehicle_ids(path)?)
        }
        None => None,
    };
    // With a vehicle filter the lattice still comes from the whole file, so
    // the subset grid stays scorable against the unfiltered ingest.
    let full = trim_empty_borders(&aggregate(&records, args.ls, args.lt, None)?)?;
    let field = match &filter {
        Some(_) => align_onto(
            &aggregate(&records, args.ls, args.lt, filter.as_ref())?,
            &full,
        )?,
        None => full,
    };
    write_atomic(&args.out_grid, |w| write_grid_csv(w, &field))?;
    write_atomic(&args.out_mask, |w| write_mask_csv(w, &field.mask))?;
    manifest.write_beside(&args.out_grid)?;
    let (n, t) = field.dims();
    println!("{n} x {t}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_split(args: SplitArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.trajectories)?;
    manifest.seed(args.seed);
    let records = read_trajectory_csv(open(&args.trajectories)?)?;
    let split = split_trajectories(&records, args.fraction, args.seed)?;
    write_atomic(&args.out, |w| {
        for id in &split.train {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })?;
    manifest.write_beside(&args.out)?;
    println!(
        "{} of {} vehicles",
        split.train.len(),
        split.train.len() + split.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

/// Overlay an explicit mask file on a grid read from CSV. The mask may
/// only mark cells unobserved; claiming a value where the grid has none is
/// an input inconsistency.
fn apply_mask(field: &mut SpeedField, mask: Array2<bool>) -> Result<()> {
    if mask.dim() != field.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match grid {:?}",
            mask.dim(),
            field.dims()
        )));
    }
    let cols = field.dims().1;
    for (idx, (&m, &present)) in mask.iter().zip(field.mask.iter()).enumerate() {
        if m && !present {
            return Err(Error::ShapeMismatch(format!(
                "mask marks cell ({}, {}) observed but the grid leaves it empty",
                idx / cols,
                idx % cols
            )));
        }
    }
    for (cell, &m) in field.values.iter_mut().zip(mask.iter()) {
        if !m {
            *cell = 0.0;
        }
    }
    field.mask = mask;
    Ok(())
}

fn cmd_impute(args: ImputeArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.grid)?;
    manifest.input(&args.mask)?;
    if let Some(path) = &args.overrides.config {
        manifest.input(path)?;
    }

    let method: Method = args.method.parse()?;
    let cfg = args.overrides.effective()?;
    manifest.config(&cfg)?;
    if let Some(seed) = cfg.seed {
        manifest.seed(seed);
    }

    let mut field = read_grid_csv(open(&args.grid)?, args.ls, args.lt)?;
    let mask = read_mask_csv(open(&args.mask)?)?;
    apply_mask(&mut field, mask)?;

    let result = impute(&field, method, &cfg)?;
    write_atomic(&args.out, |w| write_grid_csv(w, &result.completed))?;
    if let Some(trace_path) = &args.trace {
        write_atomic(trace_path, |w| result.trace.write_csv(w))?;
    }
    manifest.write_beside(&args.out)?;

    println!(
        "method={method} iterations={} converged={}",
        result.iterations, result.converged
    );
    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: stopped at the iteration cap without reaching the tolerance; outputs written"
        );
        Ok(ExitCode::from(3))
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.truth)?;
    manifest.input(&args.imputed)?;
    manifest.input(&args.train_mask)?;

    let truth = read_grid_csv(open(&args.truth)?, args.ls, args.lt)?;
    let imputed = read_grid_csv(open(&args.imputed)?, args.ls, args.lt)?;
    let train_mask = read_mask_csv(open(&args.train_mask)?)?;
    if train_mask.dim() != truth.dims() {
        return Err(Error::ShapeMismatch(format!(
            "train mask {:?} does not match truth {:?}",
            train_mask.dim(),
            truth.dims()
        )));
    }

    let report = score(&truth, &imputed, &train_mask.view())?;
    write_atomic(&args.out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report.to_json_value())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(w)?;
        Ok(())
    })?;
    manifest.write_beside(&args.out)?;

    println!(
        "mae={} rmse={} n_test={}",
        sig9(report.mae),
        sig9(report.rmse),
        report.n_test
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_trial(args: TrialArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.trajectories)?;
    if let Some(path) = &args.overrides.config {
        manifest.input(path)?;
    }

    if args.methods.is_empty() {
        return Err(Error::InvalidConfig("need at least one method".to_string()));
    }
    let cfg = args.overrides.effective()?;
    manifest.config(&cfg)?;
    manifest.seed(cfg.seed());
    let methods: Vec<(Method, RunConfig)> = args
        .methods
        .iter()
        .map(|name| Ok((name.parse()?, cfg.clone())))
        .collect::<Result<_>>()?;

    let records = read_trajectory_csv(open(&args.trajectories)?)?;
    let opts = TrialOptions {
        ls: args.ls,
        lt: args.lt,
        fraction: args.fraction,
        n_trials: args.n_trials,
        base_seed: cfg.seed(),
        jobs: args.jobs,
    };
    let report = run_trials(&records, &opts, &methods)?;

    write_atomic(&args.out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report.to_json_value())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(w)?;
        Ok(())
    })?;
    manifest.write_beside(&args.out)?;

    for (method, summary) in &report.methods {
        println!(
            "{method} mae={} rmse={} trials={}",
            sig9(summary.mae_mean),
            sig9(summary.rmse_mean),
            summary.n_trials
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_cep(args: CepArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.grid)?;
    let field = read_grid_csv(open(&args.grid)?, args.ls, args.lt)?;
    let profile = cep(&field)?;
    write_atomic(&args.out, |w| write_cep_csv(w, &profile))?;
    manifest.write_beside(&args.out)?;
    println!("{} singular values", profile.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.spec)?;
    let spec: SyntheticSpec = serde_json::from_reader(open(&args.spec)?)
        .map_err(|e| Error::InvalidConfig(format!("cannot parse synthetic spec: {e}")))?;
    manifest.seed(spec.seed);

    let (truth, train) = synth(&spec)?;
    write_atomic(&args.out_truth, |w| write_grid_csv(w, &truth))?;
    write_atomic(&args.out_train, |w| write_grid_csv(w, &train))?;
    write_atomic(&args.out_train_mask, |w| write_mask_csv(w, &train.mask))?;
    manifest.write_beside(&args.out_truth)?;

    let (n, t) = truth.dims();
    println!("{n} x {t}, missing rate {}", sig9(train.missing_rate()));
    Ok(ExitCode::SUCCESS)
}
