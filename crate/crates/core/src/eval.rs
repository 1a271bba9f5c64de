//! Metrics, spectral diagnostics, synthetic instances, and the repeated-trial
//! experiment harness.
//!
//! Scoring follows the evaluation protocol used throughout: the test set is
//! every cell observed in the ground-truth field but not in the training
//! field, so cells no vehicle ever crossed are never scored. `run_trials`
//! repeats the split/aggregate/impute/score pipeline over derived seeds
//! (`base_seed + trial_index`) and reduces to per-method mean and standard
//! deviation, mirroring the repeated-experiment tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::{JobSvd, SVDDC};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{impute, Method, RunConfig};
use crate::error::{Error, Result};
use crate::fmt::{round_sig9, sig9};
use crate::grid::{
    aggregate, split_trajectories, trim_empty_borders, SpeedField, TrajectoryRecord,
};

/// Point metrics of one imputation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean absolute error over the test set, ft/s.
    pub mae: f64,
    /// Root mean squared error over the test set, ft/s.
    pub rmse: f64,
    /// Number of scored cells.
    pub n_test: usize,
    /// Fraction of grid cells without a training observation.
    pub missing_rate: f64,
}

impl EvalReport {
    /// JSON value with floats rounded to the project-wide 9 significant
    /// digits.
    pub fn to_json_value(&self) -> Value {
        json!({
            "mae": round_sig9(self.mae),
            "rmse": round_sig9(self.rmse),
            "n_test": self.n_test,
            "missing_rate": round_sig9(self.missing_rate),
        })
    }
}

/// Score an imputed field against ground truth.
///
/// Test cells are those observed in `truth` whose `train_mask` entry is
/// false. The missing rate is reported relative to the whole grid,
/// `1 - |train cells| / (N*T)`.
pub fn score(
    truth: &SpeedField,
    imputed: &SpeedField,
    train_mask: &ArrayView2<'_, bool>,
) -> Result<EvalReport> {
    if !truth.same_lattice(imputed) {
        return Err(Error::ShapeMismatch(format!(
            "truth {:?} and imputed {:?} live on different lattices",
            truth.dims(),
            imputed.dims()
        )));
    }
    if train_mask.dim() != truth.dims() {
        return Err(Error::ShapeMismatch(format!(
            "train mask {:?} does not match field {:?}",
            train_mask.dim(),
            truth.dims()
        )));
    }
    if !imputed.is_complete() {
        return Err(Error::RequiresCompleteField);
    }

    let mut n_test = 0usize;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for ((idx, &observed), &in_train) in truth.mask.indexed_iter().zip(train_mask.iter()) {
        if observed && !in_train {
            let d = truth.values[idx] - imputed.values[idx];
            n_test += 1;
            abs_sum += d.abs();
            sq_sum += d * d;
        }
    }
    if n_test == 0 {
        return Err(Error::NothingToScore);
    }

    let (n, t) = truth.dims();
    let train_cells = train_mask.iter().filter(|&&m| m).count();
    Ok(EvalReport {
        mae: abs_sum / n_test as f64,
        rmse: (sq_sum / n_test as f64).sqrt(),
        n_test,
        missing_rate: 1.0 - train_cells as f64 / (n * t) as f64,
    })
}

/// Cumulative singular-value percentage of a complete field.
///
/// Returns `c_k = (sum of the k largest singular values) / (sum of all)`
/// for k = 1..=min(N, T). Non-decreasing with `c_last = 1` up to rounding.
pub fn cep(field: &SpeedField) -> Result<Vec<f64>> {
    if !field.is_complete() {
        return Err(Error::RequiresCompleteField);
    }
    let (_, s, _) = field
        .values
        .svddc(JobSvd::None)
        .map_err(|e| Error::DecompositionFailure(format!("cep svd: {e}")))?;
    let total: f64 = s.iter().sum();
    if !total.is_finite() {
        return Err(Error::NumericalFailure(
            "singular values overflow".to_string(),
        ));
    }
    if total <= 0.0 {
        return Err(Error::NumericalFailure(
            "zero matrix has no spectral profile".to_string(),
        ));
    }
    let mut acc = 0.0;
    Ok(s.iter()
        .map(|&sv| {
            acc += sv;
            acc / total
        })
        .collect())
}

/// Write a CEP profile as `k,cep` rows with a header, k starting at 1.
pub fn write_cep_csv<W: Write>(mut writer: W, profile: &[f64]) -> Result<()> {
    writeln!(writer, "k,cep")?;
    for (k, c) in profile.iter().enumerate() {
        writeln!(writer, "{},{}", k + 1, sig9(*c))?;
    }
    writer.flush()?;
    Ok(())
}

/// Observation mask family for synthetic instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MissingPattern {
    /// Each cell is dropped independently with probability `rate`.
    Uniform { rate: f64 },
    /// `count` distinct columns are dropped entirely; all other cells kept.
    WholeColumns { count: usize },
    /// Cells along `count` constant-slope space-time lines are kept and
    /// everything else dropped, mimicking floating-car coverage. `slope` is
    /// in ft/s; zero means stationary probes.
    Trajectories { count: usize, slope: f64 },
}

/// Recipe for a reproducible synthetic ground-truth/training pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    /// Exact rank of the noiseless field; 1 ≤ rank ≤ min(rows, cols).
    pub rank: usize,
    /// Standard deviation of additive Gaussian noise, ft/s.
    pub noise_sigma: f64,
    pub missing_pattern: MissingPattern,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(
                "synthetic grid must be non-empty".to_string(),
            ));
        }
        if self.rank == 0 || self.rank > self.rows.min(self.cols) {
            return Err(Error::InvalidConfig(format!(
                "rank {} not in 1..={}",
                self.rank,
                self.rows.min(self.cols)
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        match self.missing_pattern {
            MissingPattern::Uniform { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidPattern(format!(
                        "uniform rate must be in [0, 1), got {rate}"
                    )));
                }
            }
            MissingPattern::WholeColumns { count } => {
                if count >= self.cols {
                    return Err(Error::InvalidPattern(format!(
                        "cannot drop {count} whole columns from {} columns",
                        self.cols
                    )));
                }
            }
            MissingPattern::Trajectories { count, slope } => {
                if count == 0 {
                    return Err(Error::InvalidPattern(
                        "trajectory pattern needs at least one line".to_string(),
                    ));
                }
                if !slope.is_finite() {
                    return Err(Error::InvalidPattern(format!(
                        "trajectory slope must be finite, got {slope}"
                    )));
                }
            }
        }
        Ok(())
    }
}

const SYNTH_LS: f64 = 10.0;
const SYNTH_LT: f64 = 5.0;
const SYNTH_MEAN_SPEED: f64 = 50.0;

fn smooth_factor(rng: &mut ChaCha20Rng, len: usize, amp_lo: f64, amp_hi: f64) -> Vec<f64> {
    let amp = rng.random_range(amp_lo..amp_hi);
    let freq = rng.random_range(0.5..2.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..len)
        .map(|i| {
            let x = i as f64 / len as f64;
            1.5 + amp * (std::f64::consts::TAU * freq * x + phase).sin()
        })
        .collect()
}

fn add_outer(values: &mut Array2<f64>, scale: f64, u: &[f64], v: &[f64]) {
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            values[[i, j]] += scale * ui * vj;
        }
    }
}

/// One traveling congestion wave, exactly rank 2 as a matrix:
/// sin(k(x - ct) + phi) splits into a sin(x)cos(t) + cos(x)sin(t) pair.
fn add_traveling_wave(values: &mut Array2<f64>, rng: &mut ChaCha20Rng, budget: f64) {
    let (rows, cols) = values.dim();
    let amp = budget * rng.random_range(0.45..0.95);
    let freq = rng.random_range(1.5..3.5);
    let speed = rng.random_range(0.3..0.9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for ((i, j), cell) in values.indexed_iter_mut() {
        let x = i as f64 / rows as f64;
        let t = j as f64 / cols as f64;
        *cell += amp * (std::f64::consts::TAU * freq * (x - speed * t) + phase).sin();
    }
}

/// Noiseless field of exact matrix rank `rank`: a separable positive
/// profile plus traveling waves (rank 2 each) and, for even ranks, one
/// extra separable term. Waves make the field non-separable the way real
/// congestion is; amplitudes are budgeted so the field stays positive.
fn lowrank_field(rng: &mut ChaCha20Rng, rows: usize, cols: usize, rank: usize) -> Array2<f64> {
    let mut values = Array2::zeros((rows, cols));
    if rank == 1 {
        let u = smooth_factor(rng, rows, 0.3, 1.0);
        let v = smooth_factor(rng, cols, 0.3, 1.0);
        add_outer(&mut values, 1.0, &u, &v);
        return values;
    }
    // Near-flat base: free-flow speed with mild drift, so the congestion waves
    // carry the structure. Positivity: min 1.45^2 = 2.1 against wave dips <= 0.9.
    let waves = (rank - 1) / 2;
    let extras = (rank - 1) % 2;
    let u = smooth_factor(rng, rows, 0.005, 0.02);
    let v = smooth_factor(rng, cols, 0.005, 0.02);
    add_outer(&mut values, 1.0, &u, &v);
    for _ in 0..waves {
        add_traveling_wave(&mut values, rng, 0.9 / waves as f64);
    }
    for _ in 0..extras {
        let u = smooth_factor(rng, rows, 0.05, 0.15);
        let v = smooth_factor(rng, cols, 0.05, 0.15);
        add_outer(&mut values, 0.25, &u, &v);
    }
    values
}

fn pattern_mask(
    rng: &mut ChaCha20Rng,
    rows: usize,
    cols: usize,
    pattern: MissingPattern,
) -> Result<Array2<bool>> {
    match pattern {
        MissingPattern::Uniform { rate } => Ok(Array2::from_shape_fn((rows, cols), |_| {
            rng.random::<f64>() >= rate
        })),
        MissingPattern::WholeColumns { count } => {
            let mut mask = Array2::from_elem((rows, cols), true);
            for j in rand::seq::index::sample(rng, cols, count) {
                mask.column_mut(j).fill(false);
            }
            Ok(mask)
        }
        MissingPattern::Trajectories { count, slope } => {
            let mut mask = Array2::from_elem((rows, cols), false);
            let road = rows as f64 * SYNTH_LS;
            let window = cols as f64 * SYNTH_LT;
            for line in 0..count {
                let u = (line as f64 + rng.random::<f64>()) / count as f64;
                if slope == 0.0 {
                    let row = ((rows as f64 * u) as usize).min(rows - 1);
                    mask.row_mut(row).fill(true);
                    continue;
                }
                // A probe crossing the road takes road/|slope| seconds, so
                // entry times stratified over [-crossing, window) cover the
                // whole space-time parallelogram.
                let crossing = road / slope.abs();
                let t_entry = -crossing + (window + crossing) * u;
                let p_entry = if slope > 0.0 { 0.0 } else { road };
                let j_start = (t_entry / SYNTH_LT).floor().max(0.0) as usize;
                for j in j_start..cols {
                    let t_a = (j as f64 * SYNTH_LT).max(t_entry);
                    let t_b = (j + 1) as f64 * SYNTH_LT;
                    if t_a >= t_b {
                        continue;
                    }
                    let p_a = p_entry + slope * (t_a - t_entry);
                    let p_b = p_entry + slope * (t_b - t_entry);
                    if p_a.max(p_b) <= 0.0 || p_a.min(p_b) >= road {
                        break;
                    }
                    let lo = (p_a.min(p_b).max(0.0) / SYNTH_LS).floor() as usize;
                    let hi = ((p_a.max(p_b).min(road) / SYNTH_LS).ceil() as usize).min(rows);
                    for i in lo..hi.max(lo + 1).min(rows) {
                        mask[[i, j]] = true;
                    }
                }
            }
            if mask.iter().all(|&m| !m) {
                return Err(Error::InvalidPattern(
                    "trajectory pattern covers no cells".to_string(),
                ));
            }
            Ok(mask)
        }
    }
}

/// Generate a reproducible (truth, train) pair.
///
/// The truth field is a positive smooth field of exact matrix rank
/// `spec.rank` built from a separable profile and traveling congestion
/// waves, rescaled to a realistic mean speed and optionally perturbed by
/// clamped Gaussian noise. The train field copies truth and applies the
/// requested mask. The mask stream is drawn before the noise stream, so
/// two specs differing only in `noise_sigma` share the same mask.
pub fn synth(spec: &SyntheticSpec) -> Result<(SpeedField, SpeedField)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let mut values = lowrank_field(&mut rng, spec.rows, spec.cols, spec.rank);
    let mean = values.mean().expect("non-empty grid");
    values.mapv_inplace(|x| x * SYNTH_MEAN_SPEED / mean);

    let mask = pattern_mask(&mut rng, spec.rows, spec.cols, spec.missing_pattern)?;

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise distribution: {e}")))?;
        values.mapv_inplace(|x: f64| (x + normal.sample(&mut rng)).max(0.0));
    }

    let truth = SpeedField {
        values: values.clone(),
        mask: Array2::from_elem((spec.rows, spec.cols), true),
        ls: SYNTH_LS,
        lt: SYNTH_LT,
        origin: (0.0, 0.0),
    };
    let mut train_values = values;
    for (cell, &keep) in train_values.iter_mut().zip(mask.iter()) {
        if !keep {
            *cell = 0.0;
        }
    }
    let train = SpeedField {
        values: train_values,
        mask,
        ls: SYNTH_LS,
        lt: SYNTH_LT,
        origin: (0.0, 0.0),
    };
    Ok((truth, train))
}

/// Re-grid a field onto another field's lattice by an integer cell shift.
///
/// Cells of `template` with no counterpart in `field` come out unobserved.
/// Fails when resolutions differ or origins are not a whole number of cells
/// apart.
pub fn align_onto(field: &SpeedField, template: &SpeedField) -> Result<SpeedField> {
    if (field.ls - template.ls).abs() > 1e-9 || (field.lt - template.lt).abs() > 1e-9 {
        return Err(Error::ShapeMismatch(format!(
            "resolution mismatch: ({}, {}) vs ({}, {})",
            field.ls, field.lt, template.ls, template.lt
        )));
    }
    let row_shift = (template.origin.0 - field.origin.0) / field.ls;
    let col_shift = (template.origin.1 - field.origin.1) / field.lt;
    if (row_shift - row_shift.round()).abs() > 1e-6 || (col_shift - col_shift.round()).abs() > 1e-6
    {
        return Err(Error::ShapeMismatch(format!(
            "origins differ by a fractional cell count: ({row_shift}, {col_shift})"
        )));
    }
    let (dr, dc) = (row_shift.round() as i64, col_shift.round() as i64);
    let (rows, cols) = template.dims();
    let (src_rows, src_cols) = field.dims();
    let mut values = Array2::zeros((rows, cols));
    let mut mask = Array2::from_elem((rows, cols), false);
    for i in 0..rows {
        let si = i as i64 + dr;
        if si < 0 || si >= src_rows as i64 {
            continue;
        }
        for j in 0..cols {
            let sj = j as i64 + dc;
            if sj < 0 || sj >= src_cols as i64 {
                continue;
            }
            let src = (si as usize, sj as usize);
            values[[i, j]] = field.values[src];
            mask[[i, j]] = field.mask[src];
        }
    }
    Ok(SpeedField {
        values,
        mask,
        ls: template.ls,
        lt: template.lt,
        origin: template.origin,
    })
}

/// Harness parameters shared by every trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOptions {
    pub ls: f64,
    pub lt: f64,
    /// Probe fraction handed to the trajectory split.
    pub fraction: f64,
    pub n_trials: usize,
    /// Trial t uses seed `base_seed + t`.
    pub base_seed: u64,
    /// Worker threads; 1 runs trials inline.
    pub jobs: usize,
}

/// One method's metrics on one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub method: Method,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub n_test: usize,
    pub missing_rate: f64,
    pub wall_s: f64,
}

/// Mean/std reduction of one method across all trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodSummary {
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub wall_s_mean: f64,
    pub wall_s_std: f64,
    pub n_trials: usize,
    pub missing_rate_mean: f64,
}

/// Aggregated repeated-trial results, keyed by method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialsReport {
    pub methods: BTreeMap<Method, MethodSummary>,
    /// Flat per-trial records in (trial, method) order.
    pub trials: Vec<TrialOutcome>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TrialsReport {
    fn from_trials(trials: Vec<TrialOutcome>) -> TrialsReport {
        let mut methods = BTreeMap::new();
        for outcome in &trials {
            if methods.contains_key(&outcome.method) {
                continue;
            }
            let of_method = || {
                trials
                    .iter()
                    .filter(|o| o.method == outcome.method)
                    .copied()
            };
            let (mae_mean, mae_std) = mean_std(of_method().map(|o| o.mae));
            let (rmse_mean, rmse_std) = mean_std(of_method().map(|o| o.rmse));
            let (wall_s_mean, wall_s_std) = mean_std(of_method().map(|o| o.wall_s));
            let (missing_rate_mean, _) = mean_std(of_method().map(|o| o.missing_rate));
            methods.insert(
                outcome.method,
                MethodSummary {
                    mae_mean,
                    mae_std,
                    rmse_mean,
                    rmse_std,
                    wall_s_mean,
                    wall_s_std,
                    n_trials: of_method().count(),
                    missing_rate_mean,
                },
            );
        }
        TrialsReport { methods, trials }
    }

    /// Report JSON: one object per method with sig9-rounded floats.
    pub fn to_json_value(&self) -> Value {
        let mut root = serde_json::Map::new();
        for (method, s) in &self.methods {
            root.insert(
                method.as_str().to_string(),
                json!({
                    "mae_mean": round_sig9(s.mae_mean),
                    "mae_std": round_sig9(s.mae_std),
                    "rmse_mean": round_sig9(s.rmse_mean),
                    "rmse_std": round_sig9(s.rmse_std),
                    "wall_s_mean": round_sig9(s.wall_s_mean),
                    "wall_s_std": round_sig9(s.wall_s_std),
                    "n_trials": s.n_trials,
                    "missing_rate_mean": round_sig9(s.missing_rate_mean),
                }),
            );
        }
        Value::Object(root)
    }
}

fn run_single_trial(
    records: &[TrajectoryRecord],
    truth: &SpeedField,
    opts: &TrialOptions,
    methods: &[(Method, RunConfig)],
    trial: usize,
) -> Result<Vec<TrialOutcome>> {
    let seed = opts.base_seed.wrapping_add(trial as u64);
    let inner = || -> Result<Vec<TrialOutcome>> {
        let split = split_trajectories(records, opts.fraction, seed)?;
        let raw_train = aggregate(records, opts.ls, opts.lt, Some(&split.train))?;
        let train = align_onto(&raw_train, truth)?;
        let mut outcomes = Vec::with_capacity(methods.len());
        for (method, cfg) in methods {
            let started = Instant::now();
            let result = impute(&train, *method, cfg)?;
            let wall_s = started.elapsed().as_secs_f64();
            let report = score(truth, &result.completed, &train.mask.view())?;
            outcomes.push(TrialOutcome {
                method: *method,
                seed,
                mae: report.mae,
                rmse: report.rmse,
                n_test: report.n_test,
                missing_rate: report.missing_rate,
                wall_s,
            });
        }
        Ok(outcomes)
    };
    inner().map_err(|e| Error::TrialFailed {
        seed,
        source: Box::new(e),
    })
}

/// Repeat split/aggregate/impute/score over `n_trials` derived seeds.
///
/// Every method in a trial sees the identical training field. The ground
/// truth is the all-vehicle aggregate with empty borders trimmed; per-trial
/// training fields are re-gridded onto its lattice. A failing trial aborts
/// the whole run, identified by its seed.
pub fn run_trials(
    records: &[TrajectoryRecord],
    opts: &TrialOptions,
    methods: &[(Method, RunConfig)],
) -> Result<TrialsReport> {
    if opts.n_trials == 0 {
        return Err(Error::InvalidConfig("need at least one trial".to_string()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("need at least one method".to_string()));
    }
    if opts.jobs == 0 {
        return Err(Error::InvalidConfig("need at least one worker".to_string()));
    }
    let truth = trim_empty_borders(&aggregate(records, opts.ls, opts.lt, None)?)?;

    let per_trial: Vec<Vec<TrialOutcome>> = if opts.jobs == 1 {
        (0..opts.n_trials)
            .map(|t| run_single_trial(records, &truth, opts, methods, t))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
        pool.install(|| {
            (0..opts.n_trials)
                .into_par_iter()
                .map(|t| run_single_trial(records, &truth, opts, methods, t))
                .collect::<Result<_>>()
        })?
    };

    Ok(TrialsReport::from_trials(
        per_trial.into_iter().flatten().collect(),
    ))
}
