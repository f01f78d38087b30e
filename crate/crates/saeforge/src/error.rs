//! One error enum for the whole library.
//!
//! Variants are grouped by the subsystem that raises them. The CLI maps any
//! `SaeForgeError` to exit code 1, except config/validation problems
//! ([`SaeForgeError::Config`] and [`SaeForgeError::InvalidDataset`] raised while
//! loading inputs) which map to exit code 2.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SaeForgeError>;

#[derive(Debug, thiserror::Error)]
pub enum SaeForgeError {
    // ── I/O and file formats ────────────────────────────────────────────────
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {what} version {found} (this build reads up to {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u16,
        supported: u16,
    },

    #[error("truncated file while reading {what}")]
    Truncated { what: String },

    #[error("sidecar section mismatch: {what}")]
    SidecarMismatch { what: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    // ── Buffer / training data ─────────────────────────────────────────────
    #[error("data exhausted: source ran dry with {live} live rows, batch needs {needed}")]
    DataExhausted { live: usize, needed: usize },

    // ── Configuration ───────────────────────────────────────────────────────
    #[error("config error at `{key_path}`: {message}")]
    Config { key_path: String, message: String },

    // ── Generator ───────────────────────────────────────────────────────────
    #[error("hierarchy contains a cycle involving feature {feature}")]
    CyclicHierarchy { feature: usize },

    #[error("generator config rejected: {0}")]
    Generator(String),

    // ── SAE models ──────────────────────────────────────────────────────────
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("BatchTopK-style inference requires a calibrated theta_infer; run calibration first")]
    UncalibratedThreshold,

    #[error("architecture {arch} is not trainable ({why})")]
    NotTrainable { arch: String, why: String },

    #[error("operation {op} does not apply to architecture {arch}")]
    Unsupported { op: &'static str, arch: String },

    // ── Trainer ─────────────────────────────────────────────────────────────
    #[error("non-finite loss at step {step} (recon {recon}, sparsity {sparsity}, aux {aux})")]
    NonFiniteLoss {
        step: u64,
        recon: f64,
        sparsity: f64,
        aux: f64,
    },

    #[error("lambda targeting failed: {0}")]
    LambdaSearch(String),

    // ── Metrics ─────────────────────────────────────────────────────────────
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("dataset has no label column named {0:?}")]
    MissingLabel(String),

    #[error("metric {metric} needs {needed} usable rows/sequences, dataset has {have}")]
    TooFewRows {
        metric: &'static str,
        needed: usize,
        have: usize,
    },

    #[error("{0}")]
    Metric(String),

    // ── Autointerp / judges ─────────────────────────────────────────────────
    #[error("judge failure after {attempts} attempt(s): {message}")]
    Judge { attempts: u32, message: String },
}

impl SaeForgeError {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SaeForgeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error: 2 for config/validation
    /// problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SaeForgeError::Config { .. } | SaeForgeError::Generator(_) => 2,
            _ => 1,
        }
    }
}
