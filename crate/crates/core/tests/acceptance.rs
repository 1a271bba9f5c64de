//! Acceptance gate: one test per criterion, each printing a PASS, FAIL, or
//! SKIP line. The lines go straight to the stderr handle so they show up
//! even under the default captured harness.
//!
//! Criteria 1-4 and 7 are self-contained. Criteria 5 and 6 reproduce
//! published numbers on the NGSIM US-101 lane-2 extract and are skipped
//! with an explicit marker unless the data is present (`TSE_NGSIM_CSV` env
//! var or `data/ngsim_us101_lane2.csv` at the workspace root).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use ndarray_linalg::{JobSvd, SVDDC};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use tse_core::config::{impute_observed, Method, RunConfig};
use tse_core::embedding::{hankelize, inverse_hankelize, st_fold, st_unfold, EmbeddingSpec};
use tse_core::eval::{cep, run_trials, score, synth, MissingPattern, SyntheticSpec, TrialOptions};
use tse_core::grid::{aggregate, read_trajectory_csv, trim_empty_borders, SpeedField};
use tse_core::solver::{truncated_svt, ConvergenceTrace};

// Writing to the Stderr handle sidesteps libtest's print capture, which only
// hooks the print macros.
fn announce(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    announce(&format!(
        "ACCEPTANCE {n} ({title}): {}",
        if ok { "PASS" } else { "FAIL" }
    ));
    assert!(ok, "criterion {n} ({title}) failed: {detail}");
}

fn skip(n: u32, title: &str, why: &str) {
    announce(&format!("ACCEPTANCE {n} ({title}): SKIP - {why}"));
}

#[test]
fn criterion_1_transform_round_trip() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows = rng.random_range(3..=40);
        let cols = rng.random_range(3..=40);
        let tau_s = rng.random_range(1..=rows);
        let tau_t = rng.random_range(1..=cols);
        let x = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-60.0..60.0));
        let spec = EmbeddingSpec::new(tau_s, tau_t);

        let tensor = hankelize(&x, spec).unwrap();
        let back = inverse_hankelize(&tensor).unwrap();
        for (a, b) in x.iter().zip(back.iter()) {
            worst = worst.max((a - b).abs() / (1.0 + a.abs()));
        }

        let unfolded = st_unfold(&tensor).unwrap();
        let refolded = st_fold(&unfolded, spec, (rows, cols)).unwrap();
        for (a, b) in tensor.data.iter().zip(refolded.data.iter()) {
            worst = worst.max((a - b).abs() / (1.0 + a.abs()));
        }
    }
    let elapsed = started.elapsed();
    let ok = worst <= 1e-12 && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "transform round trip",
        ok,
        &format!("worst relative error {worst:.3e}, elapsed {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_shrinkage_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst_spectrum_gap = 0.0f64;
    let mut optimality_violations = 0usize;

    let objective = |x: &Array2<f64>, a: &Array2<f64>, tau: f64, r: usize| -> f64 {
        let (_, s, _) = x.svddc(JobSvd::None).unwrap();
        let tail: f64 = s.iter().skip(r).sum();
        let fit: f64 = x
            .iter()
            .zip(a.iter())
            .map(|(xi, ai)| (xi - ai) * (xi - ai))
            .sum();
        tau * tail + 0.5 * fit
    };

    for _ in 0..200 {
        let a = Array2::from_shape_fn((10, 8), |_| rng.random_range(-3.0..3.0));
        let r = rng.random_range(0..8);
        let tau = rng.random_range(1e-3..2.0);

        let x = truncated_svt(&a, tau, r).unwrap();

        // independent oracle: spectral construction from nalgebra's SVD
        let na = nalgebra::DMatrix::from_row_iterator(10, 8, a.iter().copied());
        let mut expected: Vec<f64> = na.singular_values().iter().copied().collect();
        expected.sort_by(|p, q| q.total_cmp(p));
        for (i, sv) in expected.iter_mut().enumerate() {
            if i >= r {
                *sv = (*sv - tau).max(0.0);
            }
        }
        let nx = nalgebra::DMatrix::from_row_iterator(10, 8, x.iter().copied());
        let mut got: Vec<f64> = nx.singular_values().iter().copied().collect();
        got.sort_by(|p, q| q.total_cmp(p));
        for (e, g) in expected.iter().zip(got.iter()) {
            worst_spectrum_gap = worst_spectrum_gap.max((e - g).abs());
        }

        // Lemma-style optimality: no random perturbation may do better
        let j_star = objective(&x, &a, tau, r);
        for _ in 0..1000 {
            let scale = rng.random_range(1e-4..0.3);
            let perturbed =
                Array2::from_shape_fn((10, 8), |idx| x[idx] + scale * rng.random_range(-1.0..1.0));
            if objective(&perturbed, &a, tau, r) < j_star - 1e-9 {
                optimality_violations += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = worst_spectrum_gap <= 1e-8
        && optimality_violations == 0
        && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "shrinkage oracle",
        ok,
        &format!(
            "spectrum gap {worst_spectrum_gap:.3e}, {optimality_violations} optimality \
             violations, elapsed {elapsed:.2?}"
        ),
    );
}

struct MethodRun {
    mae: f64,
    rmse: f64,
    converged: bool,
    iterations: usize,
    pinned: bool,
    trace: ConvergenceTrace,
}

struct SeedRun {
    lrtc: MethodRun,
    mftv: MethodRun,
    snn: MethodRun,
}

struct Suite {
    runs: Vec<SeedRun>,
    rerun_of_first_seed: SeedRun,
    elapsed: Duration,
}

/// The shared synthetic workload behind criteria 3, 4, and 7: rank-3
/// noiseless 60x80 fields, 70% uniform missing plus 5 whole columns, ten
/// seeds, all three methods with stock ADMM settings.
fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let started = Instant::now();
        let runs: Vec<SeedRun> = (0..10).map(run_seed).collect();
        let rerun_of_first_seed = run_seed(0);
        Suite {
            runs,
            rerun_of_first_seed,
            elapsed: started.elapsed(),
        }
    })
}

fn instance(seed: u64) -> (SpeedField, SpeedField) {
    let spec = SyntheticSpec {
        rows: 60,
        cols: 80,
        rank: 3,
        noise_sigma: 0.0,
        missing_pattern: MissingPattern::Uniform { rate: 0.7 },
        seed,
    };
    let (truth, mut train) = synth(&spec).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed + 1000);
    for j in rand::seq::index::sample(&mut rng, 80, 5) {
        train.mask.column_mut(j).fill(false);
        train.values.column_mut(j).fill(0.0);
    }
    (truth, train)
}

fn run_method(truth: &SpeedField, train: &SpeedField, method: Method) -> MethodRun {
    let cfg = RunConfig {
        tau_s: Some(10),
        tau_t: Some(12),
        truncation_r: Some(3),
        ..Default::default()
    };
    let mut pinned = true;
    let result = impute_observed(train, method, &cfg, |_, z| {
        for (idx, &m) in train.mask.indexed_iter() {
            if m && z[idx].to_bits() != train.values[idx].to_bits() {
                pinned = false;
            }
        }
    })
    .unwrap();
    let report = score(truth, &result.completed, &train.mask.view()).unwrap();
    MethodRun {
        mae: report.mae,
        rmse: report.rmse,
        converged: result.converged,
        iterations: result.iterations,
        pinned,
        trace: result.trace,
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let (truth, train) = instance(seed);
    SeedRun {
        lrtc: run_method(&truth, &train, Method::SthLrtc),
        mftv: run_method(&truth, &train, Method::Mftv),
        snn: run_method(&truth, &train, Method::SthSnn),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let collected: Vec<f64> = xs.collect();
    collected.iter().sum::<f64>() / collected.len() as f64
}

// Frozen from the reference run: mean RMSE 0.0754 ft/s for the Hankel
// solver on this suite, against 0.1600 (STH-SNN) and 1.4041 (MFTV). The
// bound leaves 2x headroom while staying below the better baseline.
const LRTC_RMSE_MEAN_BOUND: f64 = 0.15;

#[test]
fn criterion_3_synthetic_recovery_ordering() {
    let suite = suite();
    let lrtc_rmse = mean(suite.runs.iter().map(|r| r.lrtc.rmse));
    let mftv_rmse = mean(suite.runs.iter().map(|r| r.mftv.rmse));
    let snn_rmse = mean(suite.runs.iter().map(|r| r.snn.rmse));
    let lrtc_mae = mean(suite.runs.iter().map(|r| r.lrtc.mae));
    let mftv_mae = mean(suite.runs.iter().map(|r| r.mftv.mae));
    let snn_mae = mean(suite.runs.iter().map(|r| r.snn.mae));

    let all_converged = suite.runs.iter().all(|r| r.lrtc.converged);
    let per_seed_wins = suite
        .runs
        .iter()
        .filter(|r| r.lrtc.rmse < r.mftv.rmse && r.lrtc.rmse < r.snn.rmse)
        .count();
    let ok = all_converged
        && lrtc_rmse < mftv_rmse
        && lrtc_rmse < snn_rmse
        && lrtc_mae < mftv_mae
        && lrtc_mae < snn_mae
        && per_seed_wins >= 8
        && lrtc_rmse < LRTC_RMSE_MEAN_BOUND
        && suite.elapsed < Duration::from_secs(120);
    verdict(
        3,
        "synthetic recovery ordering",
        ok,
        &format!(
            "rmse means lrtc {lrtc_rmse:.4} mftv {mftv_rmse:.4} snn {snn_rmse:.4}, \
             mae means lrtc {lrtc_mae:.4} mftv {mftv_mae:.4} snn {snn_mae:.4}, \
             per-seed wins {per_seed_wins}/10, all converged {all_converged}, \
             elapsed {:.2?}",
            suite.elapsed
        ),
    );
}

#[test]
fn criterion_4_convergence_contract() {
    let suite = suite();
    let mut ok = true;
    let mut detail = String::new();
    for (seed, run) in suite.runs.iter().enumerate() {
        let last = run.lrtc.trace.rows.last().unwrap();
        if last.rel_change >= 1e-3 {
            ok = false;
            detail = format!("seed {seed}: final rel_change {}", last.rel_change);
        }
        for trace in [&run.lrtc.trace, &run.mftv.trace, &run.snn.trace] {
            for pair in trace.rows.windows(2) {
                if pair[1].rho < pair[0].rho {
                    ok = false;
                    detail = format!("seed {seed}: rho decreased");
                }
            }
            if trace.rows.iter().any(|row| row.rho > 10.0 + 1e-12) {
                ok = false;
                detail = format!("seed {seed}: rho exceeded its cap");
            }
        }
    }
    verdict(4, "convergence contract", ok, &detail);
}

fn ngsim_path() -> Option<PathBuf> {
    if let Ok(path) = std::env::var("TSE_NGSIM_CSV") {
        let path = PathBuf::from(path);
        if path.exists() {
            return Some(path);
        }
    }
    let fallback = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ngsim_us101_lane2.csv");
    fallback.exists().then_some(fallback)
}

#[test]
fn criterion_5_ngsim_reproduction() {
    let Some(path) = ngsim_path() else {
        skip(
            5,
            "NGSIM reproduction",
            "NGSIM US-101 lane-2 extract not found (set TSE_NGSIM_CSV or add \
             data/ngsim_us101_lane2.csv)",
        );
        return;
    };
    let records = read_trajectory_csv(std::fs::File::open(&path).unwrap()).unwrap();
    let opts = TrialOptions {
        ls: 10.0,
        lt: 5.0,
        fraction: 0.05,
        n_trials: 10,
        base_seed: 0,
        jobs: 1,
    };
    let cfg = RunConfig::default();
    let methods = vec![(Method::SthLrtc, cfg.clone()), (Method::SthSnn, cfg)];
    let report = run_trials(&records, &opts, &methods).unwrap();
    let lrtc = report.methods[&Method::SthLrtc];
    let snn = report.methods[&Method::SthSnn];

    let ok = (3.9..=5.5).contains(&lrtc.mae_mean)
        && (5.1..=7.5).contains(&lrtc.rmse_mean)
        && (lrtc.missing_rate_mean - 0.88).abs() <= 0.02
        && lrtc.wall_s_mean <= 0.5 * snn.wall_s_mean;
    verdict(
        5,
        "NGSIM reproduction",
        ok,
        &format!(
            "mae {:.3}, rmse {:.3}, missing rate {:.3}, wall {:.1}s vs snn {:.1}s",
            lrtc.mae_mean,
            lrtc.rmse_mean,
            lrtc.missing_rate_mean,
            lrtc.wall_s_mean,
            snn.wall_s_mean
        ),
    );
}

#[test]
fn criterion_6_cep_profile() {
    // unconditional part: equal singular values give an exactly linear CEP
    let n = 9;
    let eye = SpeedField {
        values: Array2::eye(n),
        mask: Array2::from_elem((n, n), true),
        ls: 10.0,
        lt: 5.0,
        origin: (0.0, 0.0),
    };
    let profile = cep(&eye).unwrap();
    let linear = profile
        .iter()
        .enumerate()
        .all(|(k, &c)| c == (k + 1) as f64 / n as f64);
    assert!(linear, "identity CEP must be exactly k/n");

    let Some(path) = ngsim_path() else {
        skip(
            6,
            "CEP profile",
            "identity check passed; NGSIM extract not found for the empirical CEP thresholds",
        );
        return;
    };
    let records = read_trajectory_csv(std::fs::File::open(&path).unwrap()).unwrap();
    let field = trim_empty_borders(&aggregate(&records, 10.0, 5.0, None).unwrap()).unwrap();
    let profile = cep(&field).unwrap();
    let ok = (profile[12] - 0.80).abs() <= 0.03
        && (profile[41] - 0.90).abs() <= 0.02
        && (profile[73] - 0.95).abs() <= 0.02;
    verdict(
        6,
        "CEP profile",
        ok,
        &format!(
            "c13 {:.4}, c42 {:.4}, c74 {:.4}",
            profile[12], profile[41], profile[73]
        ),
    );
}

#[test]
fn criterion_7_pinning_and_determinism() {
    let suite = suite();
    let all_pinned = suite
        .runs
        .iter()
        .all(|r| r.lrtc.pinned && r.mftv.pinned && r.snn.pinned);

    let first = &suite.runs[0];
    let rerun = &suite.rerun_of_first_seed;
    let identical = |a: &MethodRun, b: &MethodRun| {
        a.mae.to_bits() == b.mae.to_bits()
            && a.rmse.to_bits() == b.rmse.to_bits()
            && a.iterations == b.iterations
            && a.trace
                .rows
                .iter()
                .zip(b.trace.rows.iter())
                .all(|(x, y)| x.rel_change.to_bits() == y.rel_change.to_bits())
    };
    let reproducible = identical(&first.lrtc, &rerun.lrtc)
        && identical(&first.mftv, &rerun.mftv)
        && identical(&first.snn, &rerun.snn);

    verdict(
        7,
        "pinning and determinism",
        all_pinned && reproducible,
        &format!("pinned {all_pinned}, reproducible {reproducible}"),
    );
}
