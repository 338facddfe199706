use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate patient_id `{0}`")]
    DuplicatePatient(String),

    #[error("patient `{patient_id}`: death_date {death} precedes birth_date {birth}")]
    DeathBeforeBirth {
        patient_id: String,
        birth: NaiveDate,
        death: NaiveDate,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("patient `{0}` has no creatinine measurements")]
    NoCreatinine(String),

    #[error(
        "patient `{patient_id}` has {found} pre-window event dates, at least {required} required"
    )]
    TooFewEvents {
        patient_id: String,
        found: usize,
        required: usize,
    },

    #[error("stratification needs at least one entry of each label class")]
    SingleClass,

    #[error("split fractions must be non-negative and sum to 1 (got {0:?})")]
    Fractions([f64; 3]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("AUC is undefined unless both classes are present")]
    OneClass,

    #[error("{skipped} of {resamples} bootstrap resamples contained a single class")]
    TooManySkipped { skipped: usize, resamples: usize },

    #[error(
        "perplexity bisection did not converge for row {row} (entropy {entropy}, target {target})"
    )]
    Bisection {
        row: usize,
        entropy: f64,
        target: f64,
    },

    #[error("KL divergence rose from {previous} to {current} at iteration {iteration}")]
    KlIncrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("t-SNE produced non-finite coordinates at iteration {0}")]
    TsneNonFinite(usize),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
