//! Crate-wide error type.
//!
//! Variants map one-to-one onto the `error: <category>: <detail>` lines the
//! CLI emits, so the category name is part of the public contract.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (unknown kind, bad preset, inconsistent fields).
    #[error("config: {0}")]
    Config(String),

    /// Invalid call arguments (bad shapes are reported as `Shape`).
    #[error("argument: {0}")]
    Argument(String),

    /// Tensor shape mismatch or indivisible spatial dimensions.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Inversion attempted at a near-pure-noise timestep.
    #[error("singularity: {0}")]
    Singularity(String),

    /// Degenerate input (for example an all-zero feature matrix).
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Malformed on-disk artifact (checkpoint, feature file, report, ...).
    #[error("format: {0}")]
    Format(String),

    /// Unreadable or undecodable input data.
    #[error("ingest: {0}")]
    Ingest(String),

    /// Invalid segmentation label.
    #[error("label: {0}")]
    Label(String),

    /// Training aborted (diagnostics embedded in the message).
    #[error("train: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category token used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Singularity(_) => "singularity",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Ingest(_) => "ingest",
            Error::Label(_) => "label",
            Error::Train(_) => "train",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
