use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A single input record could not be parsed. `line` is 1-based.
    #[error("line {line}: {message}")]
    MalformedRecord {
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("duplicate note_id {note_id:?} at line {line} (first seen at line {first_line})")]
    DuplicateNoteId {
        note_id: String,
        line: usize,
        first_line: usize,
    },

    #[error("term {term:?} has conflicting entity types: line {first_line} ({first}) vs line {second_line} ({second})")]
    DictionaryConflict {
        term: String,
        first_line: usize,
        first: String,
        second_line: usize,
        second: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label matrix carries no signal: every vote is ABSTAIN")]
    NoSignal,

    #[error("labeling function ids do not match: model has {expected:?}, matrix has {found:?}")]
    LfMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("gold ids not present in the label matrix: {0:?}")]
    MissingGoldIds(Vec<String>),

    #[error("duplicate candidate id {0:?}")]
    DuplicateId(String),

    #[error("feature configuration mismatch: model expects {expected:016x}, featurizer has {found:016x}")]
    FeatureConfigMismatch { expected: u64, found: u64 },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("gold labels contain a single class; both classes are required")]
    SingleClass,

    #[error("canonical ids missing from the implant alias table: {0:?}")]
    UnknownCanonicalId(Vec<String>),

    #[error("requested split sizes {requested} exceed corpus size {available}")]
    SplitTooLarge { requested: usize, available: usize },

    #[error("design matrix is rank deficient; collinear or constant columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("{model} did not converge after {iterations} iterations; trace: {trace:?}")]
    NonConvergence {
        model: &'static str,
        iterations: usize,
        trace: Vec<f64>,
    },

    #[error("monotone likelihood for covariate {column:?}; the coefficient diverges, consider removing it")]
    MonotoneLikelihood { column: String },

    #[error("every candidate cutoff failed to fit: {0:?}")]
    AllCutoffsFailed(Vec<String>),

    #[error("binary format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::MalformedRecord {
            line,
            field: None,
            message: e.to_string(),
        }
    }
}
