use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("empty set passed to {0}")]
    EmptySet(&'static str),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("no overlap: zero correspondences at iteration {iteration}")]
    NoOverlap { iteration: usize },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("set abstraction cache invalid: expected fingerprint {expected}, found {found}")]
    CacheInvalid { expected: String, found: String },
    #[error("parse error in {source_name} at line {line}: {detail}")]
    Parse {
        source_name: String,
        line: usize,
        detail: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => Category::Usage,
            Error::Degenerate(_)
            | Error::Shape { .. }
            | Error::DegenerateCorrespondences(_)
            | Error::Divergence { .. } => Category::Numerical,
            _ => Category::Data,
        }
    }

    /// Short machine-parsable tag, e.g. `no-overlap`.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Degenerate(_) => "degenerate-input",
            Error::InsufficientPoints { .. } => "insufficient-points",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::EmptySet(_) => "empty-set",
            Error::EmptyDataset => "empty-dataset",
            Error::DegenerateCorrespondences(_) => "degenerate-correspondences",
            Error::NoOverlap { .. } => "no-overlap",
            Error::Divergence { .. } => "divergence",
            Error::CacheInvalid { .. } => "cache-invalid",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
