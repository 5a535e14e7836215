use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("sample vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("null distribution could not be estimated: {0}")]
    NullEstimationFailure(String),

    #[error("conditional kernel regularisation is numerically singular")]
    SingularRegularization,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("structural model contains a cycle through `{0}`")]
    CyclicSpec(String),

    #[error("test profile for {pair_a}-{pair_b} given {candidate} invalid: {skipped} of {total} subjects skipped")]
    InvalidProfile {
        pair_a: String,
        pair_b: String,
        candidate: String,
        skipped: usize,
        total: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: elbo={elbo}, score_matching={score_matching}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        elbo: f64,
        score_matching: f64,
    },

    #[error("training made no progress within the first {window} epochs (initial loss {initial}, loss after the window {best})")]
    NoProgress { window: usize, initial: f64, best: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("candidate signal `{0}` has zero variance")]
    DegenerateSignal(String),

    #[error("{failed} of {total} stability runs failed")]
    StabilityFailed { failed: usize, total: usize },

    #[error("no labels.csv in {0}")]
    MissingLabels(PathBuf),

    #[error("{file}: columns do not match labels.csv ({detail})")]
    NodeMismatch { file: PathBuf, detail: String },

    #[error("{file}: non-finite value at row {row}, column `{column}`")]
    NonFiniteData { file: PathBuf, row: usize, column: String },

    #[error("malformed data in {file}: {detail}")]
    MalformedData { file: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Config,
            Error::MissingLabels(_)
            | Error::NodeMismatch { .. }
            | Error::NonFiniteData { .. }
            | Error::MalformedData { .. }
            | Error::UnknownNode(_)
            | Error::CyclicSpec(_)
            | Error::LengthMismatch(..)
            | Error::DimensionMismatch { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}
