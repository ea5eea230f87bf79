use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("corpus {0} has no non-blank lines")]
    EmptyCorpus(PathBuf),

    #[error("parallel files are not aligned: {src} vs {tgt} sentences")]
    Alignment { src: usize, tgt: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate (zero-norm) vector at row {row}")]
    DegenerateVector { row: usize },

    #[error("training diverged at step {step}: non-finite value in {what}")]
    Divergence { what: String, step: u64 },

    #[error("unsupported corpus: {0}")]
    UnsupportedCorpus(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), offset, message: message.into() }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Precondition(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
