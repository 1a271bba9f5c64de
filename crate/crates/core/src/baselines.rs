//! Reference completion baselines sharing the main solver's input, output,
//! and trace formats.
//!
//! `mftv` completes the field directly in matrix space, balancing a nuclear
//! norm term against an anisotropic total-variation term, each handled by
//! its own ADMM block. `sth_snn` works on the same delay-embedded tensor as
//! the main solver but penalizes a weighted sum of plain (untruncated)
//! nuclear norms of the four mode unfoldings.

use std::time::Instant;

use ndarray::{Array2, Array4};

use crate::embedding::{EmbeddingSpec, HankelTensor, Hankelizer};
use crate::error::{Error, Result};
use crate::grid::SpeedField;
use crate::solver::{
    check_observed_finite, frob_diff, init_iterate, pin, truncated_svt_with_spectrum,
    validate_admm_params, ConvergenceTrace, ImputationResult, TraceRow,
};

/// Parameters of the matrix-factorization + total-variation baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MftvConfig {
    /// Weight of the total-variation term relative to the nuclear norm.
    pub gamma: f64,
    pub rho0: f64,
    pub rho_max: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl MftvConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        validate_admm_params(
            self.rho0,
            self.rho_max,
            self.beta,
            self.epsilon,
            self.max_iters,
        )
    }
}

/// Parameters of the sum-of-nuclear-norms baseline on the embedded tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnnConfig {
    /// Per-mode weights; non-negative, summing to one. A zero weight makes
    /// that mode inert: no shrinkage, no dual, no consensus contribution.
    pub alphas: [f64; 4],
    pub spec: EmbeddingSpec,
    pub rho0: f64,
    pub rho_max: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl SnnConfig {
    pub fn validate_for(&self, shape: (usize, usize)) -> Result<()> {
        self.spec.validate_for(shape.0, shape.1)?;
        for a in self.alphas {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "mode weights must be non-negative, got {:?}",
                    self.alphas
                )));
            }
        }
        let sum: f64 = self.alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mode weights must sum to 1, got {sum}"
            )));
        }
        validate_admm_params(
            self.rho0,
            self.rho_max,
            self.beta,
            self.epsilon,
            self.max_iters,
        )
    }
}

/// Anisotropic total variation: the sum of absolute differences over all
/// horizontally and vertically adjacent cell pairs.
pub fn tv_regularizer(x: &Array2<f64>) -> f64 {
    let (n, t) = x.dim();
    let mut tv = 0.0;
    for i in 0..n {
        for j in 0..t.saturating_sub(1) {
            tv += (x[[i, j + 1]] - x[[i, j]]).abs();
        }
    }
    for i in 0..n.saturating_sub(1) {
        for j in 0..t {
            tv += (x[[i + 1, j]] - x[[i, j]]).abs();
        }
    }
    tv
}

/// Proximal operator of `lambda * TV`: minimizes
/// `0.5 * ||x - v||^2 + lambda * TV(x)` by iterative clipping on the dual
/// variables of the difference operators (step 1/8 bounds the operator
/// norm of the 2-D anisotropic difference map), stopping at relative change
/// 1e-6 or 50 inner iterations.
pub fn prox_tv(v: &Array2<f64>, lambda: f64) -> Array2<f64> {
    const ALPHA: f64 = 8.0;
    const MAX_INNER: usize = 50;
    const TOL: f64 = 1e-6;

    let (n, t) = v.dim();
    if lambda == 0.0 || (n <= 1 && t <= 1) {
        return v.clone();
    }

    let h_cols = t.saturating_sub(1);
    let v_rows = n.saturating_sub(1);
    let mut uh = Array2::<f64>::zeros((n, h_cols));
    let mut uv = Array2::<f64>::zeros((v_rows, t));
    let mut x = v.clone();

    for _ in 0..MAX_INNER {
        // Ascend the duals along the forward differences of the current
        // primal, clipped to the lambda box.
        for i in 0..n {
            for j in 0..h_cols {
                let g = x[[i, j + 1]] - x[[i, j]];
                uh[[i, j]] = (uh[[i, j]] + g / ALPHA).clamp(-lambda, lambda);
            }
        }
        for i in 0..v_rows {
            for j in 0..t {
                let g = x[[i + 1, j]] - x[[i, j]];
                uv[[i, j]] = (uv[[i, j]] + g / ALPHA).clamp(-lambda, lambda);
            }
        }

        // x = v - Dh^T uh - Dv^T uv
        let mut x_new = v.clone();
        for i in 0..n {
            for j in 0..h_cols {
                let u = uh[[i, j]];
                x_new[[i, j]] += u;
                x_new[[i, j + 1]] -= u;
            }
        }
        for i in 0..v_rows {
            for j in 0..t {
                let u = uv[[i, j]];
                x_new[[i, j]] += u;
                x_new[[i + 1, j]] -= u;
            }
        }

        let delta = frob_diff(&x_new, &x);
        let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        x = x_new;
        if delta / scale <= TOL {
            break;
        }
    }
    x
}

/// Mode-k unfolding of a fourth order tensor: rows index mode k, columns
/// index the remaining modes in increasing order, first one fastest.
pub fn mode_unfold(t: &Array4<f64>, k: usize) -> Result<Array2<f64>> {
    if k >= 4 {
        return Err(Error::InvalidConfig(format!("mode {k} out of range 0..4")));
    }
    let d = t.dim();
    let dims = [d.0, d.1, d.2, d.3];
    let rest: Vec<usize> = (0..4).filter(|&m| m != k).collect();
    let cols: usize = rest.iter().map(|&m| dims[m]).product();
    let mut out = Array2::<f64>::zeros((dims[k], cols));
    let mut idx = [0usize; 4];
    for i0 in 0..dims[0] {
        idx[0] = i0;
        for i1 in 0..dims[1] {
            idx[1] = i1;
            for i2 in 0..dims[2] {
                idx[2] = i2;
                for i3 in 0..dims[3] {
                    idx[3] = i3;
                    let col = idx[rest[2]] * dims[rest[1]] * dims[rest[0]]
                        + idx[rest[1]] * dims[rest[0]]
                        + idx[rest[0]];
                    out[[idx[k], col]] = t[[i0, i1, i2, i3]];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`mode_unfold`] for a tensor of shape `dims`.
pub fn mode_fold(m: &Array2<f64>, k: usize, dims: [usize; 4]) -> Result<Array4<f64>> {
    if k >= 4 {
        return Err(Error::InvalidConfig(format!("mode {k} out of range 0..4")));
    }
    let rest: Vec<usize> = (0..4).filter(|&x| x != k).collect();
    let cols: usize = rest.iter().map(|&x| dims[x]).product();
    if m.dim() != (dims[k], cols) {
        return Err(Error::FoldShape(format!(
            "mode-{k} unfolding of {dims:?} is {}x{cols}, got {}x{}",
            dims[k],
            m.dim().0,
            m.dim().1
        )));
    }
    let mut out = Array4::<f64>::zeros((dims[0], dims[1], dims[2], dims[3]));
    let mut idx = [0usize; 4];
    for i0 in 0..dims[0] {
        idx[0] = i0;
        for i1 in 0..dims[1] {
            idx[1] = i1;
            for i2 in 0..dims[2] {
                idx[2] = i2;
                for i3 in 0..dims[3] {
                    idx[3] = i3;
                    let col = idx[rest[2]] * dims[rest[1]] * dims[rest[0]]
                        + idx[rest[1]] * dims[rest[0]]
                        + idx[rest[0]];
                    out[[i0, i1, i2, i3]] = m[[idx[k], col]];
                }
            }
        }
    }
    Ok(out)
}

/// Matrix completion balancing nuclear norm and total variation.
pub fn mftv(train: &SpeedField, cfg: &MftvConfig) -> Result<ImputationResult> {
    mftv_observed(train, cfg, |_, _| {})
}

/// As [`mftv`], invoking `observer(iter, z)` after every logged iteration.
pub fn mftv_observed(
    train: &SpeedField,
    cfg: &MftvConfig,
    mut observer: impl FnMut(usize, &Array2<f64>),
) -> Result<ImputationResult> {
    cfg.validate()?;
    check_observed_finite(train)?;
    let y_norm = train.observed_norm();
    if y_norm == 0.0 {
        return Err(Error::DegenerateNormalizer);
    }

    let mut z = init_iterate(train, false);
    let mut e1 = z.clone();
    let mut e2 = z.clone();
    let mut rho = cfg.rho0;
    let mut trace = ConvergenceTrace::default();
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let t0 = Instant::now();

        let w1 = ndarray::Zip::from(&z)
            .and(&e1)
            .map_collect(|&z, &e| z - e / rho);
        let (x1, spectrum) = truncated_svt_with_spectrum(&w1, 1.0 / rho, 0)?;
        let w2 = ndarray::Zip::from(&z)
            .and(&e2)
            .map_collect(|&z, &e| z - e / rho);
        let x2 = prox_tv(&w2, cfg.gamma / rho);

        // Consensus: average the two block estimates, then pin measurements.
        let mut z_new = ndarray::Zip::from(&x1)
            .and(&e1)
            .and(&x2)
            .and(&e2)
            .map_collect(|&x1, &e1, &x2, &e2| 0.5 * ((x1 + e1 / rho) + (x2 + e2 / rho)));
        pin(&mut z_new, train);
        if z_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "iterate diverged at iteration {iter}"
            )));
        }

        let rel = frob_diff(&z_new, &z) / y_norm;

        ndarray::Zip::from(&mut e1)
            .and(&x1)
            .and(&z_new)
            .for_each(|e, &x, &z| *e += rho * (x - z));
        ndarray::Zip::from(&mut e2)
            .and(&x2)
            .and(&z_new)
            .for_each(|e, &x, &z| *e += rho * (x - z));

        let objective = spectrum.iter().sum::<f64>() + cfg.gamma * tv_regularizer(&x2);
        trace.rows.push(TraceRow {
            iter,
            rel_change: rel,
            rho,
            tnn_value: objective,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        observer(iter, &z_new);

        z = z_new;
        rho = (cfg.beta * rho).min(cfg.rho_max);
        if rel < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let iterations = trace.rows.len();
    Ok(ImputationResult {
        completed: SpeedField {
            values: z,
            mask: Array2::from_elem(train.dims(), true),
            ls: train.ls,
            lt: train.lt,
            origin: train.origin,
        },
        trace,
        converged,
        iterations,
    })
}

/// Tensor completion with a weighted sum of per-mode nuclear norms on the
/// delay-embedded tensor.
pub fn sth_snn(train: &SpeedField, cfg: &SnnConfig) -> Result<ImputationResult> {
    sth_snn_observed(train, cfg, |_, _| {})
}

/// As [`sth_snn`], invoking `observer(iter, z)` after every logged iteration.
pub fn sth_snn_observed(
    train: &SpeedField,
    cfg: &SnnConfig,
    mut observer: impl FnMut(usize, &Array2<f64>),
) -> Result<ImputationResult> {
    cfg.validate_for(train.dims())?;
    check_observed_finite(train)?;
    let y_norm = train.observed_norm();
    if y_norm == 0.0 {
        return Err(Error::DegenerateNormalizer);
    }

    let hank = Hankelizer::new(cfg.spec, train.dims())?;
    let d4 = cfg.spec.tensor_shape(train.dims().0, train.dims().1);
    let dims = [d4.0, d4.1, d4.2, d4.3];
    let active: Vec<usize> = (0..4).filter(|&k| cfg.alphas[k] > 0.0).collect();

    let mut z = init_iterate(train, false);
    let mut t = hank.hankelize(&z)?.data;
    let mut es: Vec<Array4<f64>> = active.iter().map(|_| t.clone()).collect();
    let mut rho = cfg.rho0;
    let mut trace = ConvergenceTrace::default();
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let t0 = Instant::now();

        // Per-mode shrinkage blocks.
        let mut mk: Vec<Array4<f64>> = Vec::with_capacity(active.len());
        let mut objective = 0.0;
        for (slot, &k) in active.iter().enumerate() {
            let shifted = ndarray::Zip::from(&t)
                .and(&es[slot])
                .map_collect(|&t, &e| t - e / rho);
            let unfolded = mode_unfold(&shifted, k)?;
            let (shrunk, spectrum) =
                truncated_svt_with_spectrum(&unfolded, cfg.alphas[k] / rho, 0)?;
            objective += cfg.alphas[k] * spectrum.iter().sum::<f64>();
            mk.push(mode_fold(&shrunk, k, dims)?);
        }

        // Weighted consensus over active modes, then back to matrix space.
        let mut w = Array4::<f64>::zeros(d4);
        for (slot, &k) in active.iter().enumerate() {
            let alpha = cfg.alphas[k];
            ndarray::Zip::from(&mut w)
                .and(&mk[slot])
                .and(&es[slot])
                .for_each(|w, &m, &e| *w += alpha * (m + e / rho));
        }
        let w_tensor = HankelTensor {
            data: w,
            spec: cfg.spec,
            source_shape: train.dims(),
        };
        let mut z_new = hank.inverse_hankelize(&w_tensor)?;
        pin(&mut z_new, train);
        if z_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "iterate diverged at iteration {iter}"
            )));
        }

        let rel = frob_diff(&z_new, &z) / y_norm;

        let t_new = hank.hankelize(&z_new)?.data;
        for (slot, _) in active.iter().enumerate() {
            ndarray::Zip::from(&mut es[slot])
                .and(&mk[slot])
                .and(&t_new)
                .for_each(|e, &m, &t| *e += rho * (m - t));
        }

        trace.rows.push(TraceRow {
            iter,
            rel_change: rel,
            rho,
            tnn_value: objective,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        observer(iter, &z_new);

        z = z_new;
        t = t_new;
        rho = (cfg.beta * rho).min(cfg.rho_max);
        if rel < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let iterations = trace.rows.len();
    Ok(ImputationResult {
        completed: SpeedField {
            values: z,
            mask: Array2::from_elem(train.dims(), true),
            ls: train.ls,
            lt: train.lt,
            origin: train.origin,
        },
        trace,
        converged,
        iterations,
    })
}
