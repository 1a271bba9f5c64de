//! Wire-format configuration shared by the CLI and the evaluation harness.
//!
//! A [`RunConfig`] mirrors the JSON config file: every key optional, missing
//! keys falling back to the built-in defaults below. Values supplied on a
//! command line are expressed as a second `RunConfig` layered over the file
//! with [`RunConfig::merged_over`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{mftv_observed, sth_snn_observed, MftvConfig, SnnConfig};
use crate::embedding::EmbeddingSpec;
use crate::error::{Error, Result};
use crate::grid::SpeedField;
use crate::solver::{sth_lrtc_observed, ImputationResult, SolverConfig};

pub const DEFAULT_TAU_S: usize = 40;
pub const DEFAULT_TAU_T: usize = 30;
pub const DEFAULT_RHO0: f64 = 5e-6;
pub const DEFAULT_RHO_MAX: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 1.1;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_ALPHAS: [f64; 4] = [0.1, 0.4, 0.1, 0.4];
pub const DEFAULT_SEED: u64 = 0;

/// The completion methods exposed end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    SthLrtc,
    Mftv,
    SthSnn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SthLrtc, Method::Mftv, Method::SthSnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SthLrtc => "sth-lrtc",
            Method::Mftv => "mftv",
            Method::SthSnn => "sth-snn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sth-lrtc" => Ok(Method::SthLrtc),
            "mftv" => Ok(Method::Mftv),
            "sth-snn" => Ok(Method::SthSnn),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?}; expected sth-lrtc, mftv, or sth-snn"
            ))),
        }
    }
}

/// Partial configuration as read from a JSON file or assembled from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_fill_warm_start: Option<bool>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("cannot parse config: {e}")))
    }

    pub fn from_json_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        serde_json::from_reader(reader)
            .map_err(|e| Error::InvalidConfig(format!("cannot parse config: {e}")))
    }

    /// Layer `self` over `base`: any key set here wins, the rest fall
    /// through. Used for flag-over-file precedence.
    pub fn merged_over(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            tau_s: self.tau_s.or(base.tau_s),
            tau_t: self.tau_t.or(base.tau_t),
            rho0: self.rho0.or(base.rho0),
            rho_max: self.rho_max.or(base.rho_max),
            beta: self.beta.or(base.beta),
            epsilon: self.epsilon.or(base.epsilon),
            truncation_r: self.truncation_r.or(base.truncation_r),
            max_iters: self.max_iters.or(base.max_iters),
            seed: self.seed.or(base.seed),
            gamma: self.gamma.or(base.gamma),
            alphas: self.alphas.or(base.alphas),
            mean_fill_warm_start: self.mean_fill_warm_start.or(base.mean_fill_warm_start),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn spec(&self) -> EmbeddingSpec {
        EmbeddingSpec::new(
            self.tau_s.unwrap_or(DEFAULT_TAU_S),
            self.tau_t.unwrap_or(DEFAULT_TAU_T),
        )
    }

    /// Resolve against a field shape; the default truncation rank is 5% of
    /// the space cells.
    pub fn resolve_solver(&self, shape: (usize, usize)) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            spec: self.spec(),
            rho0: self.rho0.unwrap_or(DEFAULT_RHO0),
            rho_max: self.rho_max.unwrap_or(DEFAULT_RHO_MAX),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            truncation_r: self
                .truncation_r
                .unwrap_or_else(|| SolverConfig::default_truncation(shape.0)),
            max_iters: self.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
            mean_fill_warm_start: self.mean_fill_warm_start.unwrap_or(false),
        };
        cfg.validate_for(shape)?;
        Ok(cfg)
    }

    pub fn resolve_mftv(&self) -> Result<MftvConfig> {
        let cfg = MftvConfig {
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            rho0: self.rho0.unwrap_or(DEFAULT_RHO0),
            rho_max: self.rho_max.unwrap_or(DEFAULT_RHO_MAX),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            max_iters: self.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_snn(&self, shape: (usize, usize)) -> Result<SnnConfig> {
        let cfg = SnnConfig {
            alphas: self.alphas.unwrap_or(DEFAULT_ALPHAS),
            spec: self.spec(),
            rho0: self.rho0.unwrap_or(DEFAULT_RHO0),
            rho_max: self.rho_max.unwrap_or(DEFAULT_RHO_MAX),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            max_iters: self.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
        };
        cfg.validate_for(shape)?;
        Ok(cfg)
    }
}

/// Run the chosen method on a field with a wire-level config.
pub fn impute(train: &SpeedField, method: Method, cfg: &RunConfig) -> Result<ImputationResult> {
    impute_observed(train, method, cfg, |_, _| {})
}

/// As [`impute`], forwarding the per-iteration observer to the method.
pub fn impute_observed(
    train: &SpeedField,
    method: Method,
    cfg: &RunConfig,
    observer: impl FnMut(usize, &ndarray::Array2<f64>),
) -> Result<ImputationResult> {
    match method {
        Method::SthLrtc => {
            let solver_cfg = cfg.resolve_solver(train.dims())?;
            sth_lrtc_observed(train, &solver_cfg, observer)
        }
        Method::Mftv => {
            let mftv_cfg = cfg.resolve_mftv()?;
            mftv_observed(train, &mftv_cfg, observer)
        }
        Method::SthSnn => {
            let snn_cfg = cfg.resolve_snn(train.dims())?;
            sth_snn_observed(train, &snn_cfg, observer)
        }
    }
}
