//! Crate-wide error type and result alias.
//!
//! Every fallible public operation returns [`Result`]. Errors carry enough
//! context to be actionable: shape mismatches name both shapes, checkpoint
//! format errors name expected vs. found, config errors name the field.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes for the named operation.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A single operand violated a shape requirement (e.g. diag on a
    /// non-square matrix, bias that is not a row vector).
    #[error("bad shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A vector with norm at or below the normalization guard cannot be
    /// normalized.
    #[error("row {row} has norm {norm:e}, at or below the {eps:e} normalization guard")]
    NearZeroNorm { row: usize, norm: f64, eps: f64 },

    /// A value that must be finite (input, loss, gradient) was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Finite-difference step outside the supported range.
    #[error("grad_check eps {eps:e} outside supported range [1e-7, 1e-3]")]
    EpsOutOfRange { eps: f64 },

    /// A grad_check probe evaluation returned a non-finite loss.
    #[error("grad_check: non-finite loss while perturbing parameter {param_index}")]
    NonFiniteEval { param_index: usize },

    /// Temperature must be strictly positive.
    #[error("temperature must be > 0, got {tau}")]
    Temperature { tau: f64 },

    /// An embedding row that was required to be unit-normalized was not.
    #[error("{side} row {row} has norm {norm} but unit rows are required")]
    NotNormalized { side: &'static str, row: usize, norm: f64 },

    /// An operation that needs at least one sample got none.
    #[error("empty batch in {op}")]
    EmptyBatch { op: &'static str },

    /// A numeric label outside the [0, 1] spectrum.
    #[error("label value {value} outside [0, 1]")]
    LabelOutOfRange { value: f64 },

    /// A label token that is neither a float nor a known class name.
    #[error("unrecognized label token {token:?}; expected CN, MCI, AD, or a float in [0, 1]")]
    LabelToken { token: String },

    /// Dataset schema or content problem (missing column, overlapping
    /// modality claims, inconsistent image dimensions, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Configuration problem: unknown key, invalid value, missing path.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint bytes violate the format contract.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A modality name that the checkpoint does not carry.
    #[error("unknown modality {name:?}; checkpoint has: {available}")]
    UnknownModality { name: String, available: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/schema problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::NonFiniteEval { .. }
            | Error::NearZeroNorm { .. } => 3,
            _ => 2,
        }
    }
}
