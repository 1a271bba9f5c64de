//! Floating-point text formatting used by every writer in the crate.
//!
//! All floats leave the process with 9 significant digits, enough to
//! round-trip the quantities we care about while keeping files diffable.

/// Format with 9 significant digits in scientific notation.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Round to the value obtained by printing with [`sig9`] and parsing back.
/// Used before serializing floats into JSON documents.
pub fn round_sig9(x: f64) -> f64 {
    sig9(x).parse().unwrap_or(x)
}
