//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A record set (possibly after vehicle filtering) contained nothing to
    /// aggregate.
    #[error("no observations: {0}")]
    NoObservations(String),

    /// A trajectory record failed validation. Rows are 1-based data rows,
    /// excluding the header.
    #[error("malformed record at row {row}: {reason}")]
    MalformedRecord { row: usize, reason: String },

    /// A grid, mask, or trace file could not be parsed. Rows are 1-based.
    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },

    /// A field holds no observed cells at all.
    #[error("empty field")]
    EmptyField,

    /// Train fraction outside (0, 1].
    #[error("invalid fraction: {0}")]
    InvalidFraction(f64),

    /// Embedding window exceeds the field along some axis.
    #[error("embedding too large: window {tau_s}x{tau_t} does not fit field {rows}x{cols}")]
    EmbeddingTooLarge {
        tau_s: usize,
        tau_t: usize,
        rows: usize,
        cols: usize,
    },

    /// A Hankel tensor's dimensions disagree with its recorded embedding spec
    /// or source shape.
    #[error("inconsistent tensor: {0}")]
    InconsistentTensor(String),

    /// A matrix cannot be folded back into the requested tensor shape.
    #[error("fold shape error: {0}")]
    FoldShape(String),

    /// Two gridded operands do not share a lattice or shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value violates its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Non-finite values reached a numerical kernel.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// LAPACK refused a decomposition.
    #[error("decomposition failure: {0}")]
    DecompositionFailure(String),

    /// The observed part of the input has zero Frobenius norm, so relative
    /// convergence is undefined.
    #[error("degenerate normalizer")]
    DegenerateNormalizer,

    /// The test set of a scoring call is empty.
    #[error("nothing to score")]
    NothingToScore,

    /// An operation defined only for fully observed fields was handed an
    /// incomplete one.
    #[error("requires complete field")]
    RequiresCompleteField,

    /// A synthetic missing pattern cannot be realized on the requested grid.
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    /// A trial inside a multi-trial evaluation failed; the seed identifies it.
    #[error("trial with seed {seed} failed: {source}")]
    TrialFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user-supplied configuration rather
    /// than by data or numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidFraction(_)
                | Error::EmbeddingTooLarge { .. }
                | Error::InvalidPattern(_)
        )
    }
}
