use std::path::PathBuf;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset failed validation with {} violation(s): {}", .0.violations.len(), .0.summary())]
    Invalid(ValidationReport),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error("class {class:?} has {n} masks, above the clustering cap of {cap}; subsample first")]
    TooManyMasks { class: String, n: usize, cap: usize },

    #[error("mask {0:?} has no gt_iou")]
    MissingGroundTruth(String),

    #[error("engine invariant violated: {message}")]
    Invariant { message: String, state_dump: String },

    #[error("run suspended awaiting {pending} answer(s)")]
    Suspended { pending: usize },

    #[error("session {0:?} not found")]
    UnknownSession(String),

    #[error("session {0:?} already exists")]
    SessionExists(String),

    #[error("question token {0:?} is not outstanding")]
    UnknownToken(String),

    #[error("question token {0:?} was already answered")]
    DuplicateAnswer(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("injected crash at {0}")]
    InjectedCrash(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad input data rather than a bug or the
    /// environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Invalid(_)
                | Error::Input(_)
                | Error::Config(_)
                | Error::TooManyMasks { .. }
                | Error::MissingGroundTruth(_)
                | Error::Version { .. }
                | Error::Json(_)
        )
    }
}
