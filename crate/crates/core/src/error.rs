use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("batch-size error: {op} needs at least {min} rows, got {got}")]
    BatchSize {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("load error: {msg}: {}", offenders.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Load { msg: String, offenders: Vec<PathBuf> },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Divergence {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::BatchSize { .. } => "batch_size",
            Error::Label { .. } => "label",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Load { .. } => "load",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
        }
    }
}
