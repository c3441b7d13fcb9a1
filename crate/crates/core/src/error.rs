use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss([usize; 5]),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("architecture row {row}: {detail}")]
    Table { row: usize, detail: String },

    #[error("malformed architecture table: {0}")]
    TableSyntax(#[from] serde_json::Error),

    #[error("invalid block: {0}")]
    Block(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid attention binding on edge {src}->{dst}: {detail}")]
    Attention { src: usize, dst: usize, detail: String },

    #[error("resolution mismatch: cannot upsample {from:?} to {to:?}")]
    Upsample { from: (usize, usize), to: (usize, usize) },

    #[error("missing input modality `{0}`")]
    MissingModality(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("models are not comparable: {0}")]
    Incomparable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used for CLI exit lines and FFI codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Empty(_) | Error::NonScalarLoss(_) => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::LabelOutOfRange { .. } => "label",
            Error::Table { .. } | Error::TableSyntax(_) => "table",
            Error::Block(_) | Error::Graph(_) | Error::Attention { .. } => "graph",
            Error::Upsample { .. } => "resolution",
            Error::MissingModality(_) => "input",
            Error::Config(_) | Error::Incomparable(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
