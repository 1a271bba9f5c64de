//! Reconstruction of complete space-time traffic speed fields from sparse
//! trajectory observations.
//!
//! A handful of probe vehicles yields speed measurements along thin diagonal
//! bands of the space-time plane; everything between them is unknown. The
//! reconstruction pipeline here turns raw trajectory records into a gridded
//! [`grid::SpeedField`], lifts the partially observed matrix into a fourth
//! order tensor by two-way delay embedding ([`embedding`]), and fills the
//! missing cells by truncated-nuclear-norm tensor completion solved with ADMM
//! ([`solver::sth_lrtc`]). Two reference baselines operating on the same
//! inputs live in [`baselines`], and [`eval`] provides synthetic instances,
//! scoring, and multi-trial evaluation.

// Force linkage of the system BLAS backing ndarray's matrix products.
extern crate blas_src;

pub mod baselines;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod grid;
pub mod solver;

pub use error::{Error, Result};

// Re-exported so downstream users name the same ndarray the public API does.
pub use ndarray;
