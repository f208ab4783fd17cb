use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

/// Exit codes, also listed in the top-level help.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_INPUT: i32 = 4;
    pub const INVALID_DATA: i32 = 5;
    pub const MODEL: i32 = 6;
    pub const LOCKED: i32 = 7;
    pub const IO: i32 = 8;
}

pub const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown subcommand or bad flag)
  3  invalid project configuration
  4  missing input file or upstream artifact
  5  invalid input data
  6  model fitting failed (no signal, non-convergence, rank deficiency, ...)
  7  another command holds the output directory lock
  8  other i/o failure

Environment overrides for paths: DEVSURV_OUTPUT_DIR, DEVSURV_NOTES,
DEVSURV_DICTIONARIES (path-list separated), DEVSURV_TRIGGER_LEXICON,
DEVSURV_HEADER_LEXICON, DEVSURV_REGISTRY, DEVSURV_PATIENTS, DEVSURV_CODES,
DEVSURV_IMPLANT_CATALOG, DEVSURV_MANUFACTURER_ALIASES, DEVSURV_GOLD_RELATIONS.

On failure a JSON object {\"code\", \"message\", \"context\"} is written to stderr.";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {message}")]
    Config {
        message: String,
        path: Option<PathBuf>,
    },

    #[error("input not found: {}", path.display())]
    MissingInput { path: PathBuf, hint: Option<String> },

    #[error("output directory {} is locked by another command (lock file {})", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] devsurv::Error),
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            message: message.into(),
            path: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        CliError::MissingInput {
            path: path.into(),
            hint: Some(hint.into()),
        }
    }

    pub fn code(&self) -> &'static str {
        use devsurv::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "invalid_config",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Locked { .. } => "locked",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    "missing_input"
                }
                E::Io { .. } => "io",
                E::NoSignal
                | E::EmptyTrainingSet
                | E::SingleClass
                | E::RankDeficient { .. }
                | E::NonConvergence { .. }
                | E::MonotoneLikelihood { .. }
                | E::AllCutoffsFailed(_) => "model_failure",
                _ => "invalid_data",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "usage" => exit::USAGE,
            "invalid_config" => exit::CONFIG,
            "missing_input" => exit::MISSING_INPUT,
            "locked" => exit::LOCKED,
            "model_failure" => exit::MODEL,
            "io" => exit::IO,
            _ => exit::INVALID_DATA,
        }
    }

    fn context(&self) -> Value {
        use devsurv::Error as E;
        match self {
            CliError::Config { path, .. } => json!({ "path": path }),
            CliError::MissingInput { path, hint } => json!({ "path": path, "hint": hint }),
            CliError::Locked { dir, lock } => json!({ "output_dir": dir, "lock": lock }),
            CliError::Io { path, .. } => json!({ "path": path }),
            CliError::Core(e) => match e {
                E::Io { path, .. } => json!({ "path": path }),
                E::MalformedRecord { line, field, .. } => json!({ "line": line, "field": field }),
                E::DuplicateNoteId { note_id, line, .. } => {
                    json!({ "note_id": note_id, "line": line })
                }
                E::NonConvergence {
                    model, iterations, ..
                } => json!({ "model": model, "iterations": iterations }),
                E::RankDeficient { columns } => json!({ "columns": columns }),
                E::MonotoneLikelihood { column } => json!({ "column": column }),
                E::LfMismatch { expected, found } => {
                    json!({ "expected": expected, "found": found })
                }
                _ => json!({}),
            },
            CliError::Usage(_) => json!({}),
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            code: &'a str,
            message: String,
            context: Value,
        }
        serde_json::to_string(&Payload {
            code: self.code(),
            message: self.to_string(),
            context: self.context(),
        })
        .unwrap_or_else(|_| format!("{{\"code\":\"{}\"}}", self.code()))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_input_json_names_path() {
        let e = CliError::missing("/data/notes.jsonl", "set paths.notes");
        let v: Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["code"], "missing_input");
        assert_eq!(v["context"]["path"], "/data/notes.jsonl");
        assert!(v["message"].as_str().unwrap().contains("/data/notes.jsonl"));
        assert_eq!(e.exit_code(), exit::MISSING_INPUT);
    }

    #[test]
    fn core_errors_map_to_codes() {
        assert_eq!(
            CliError::from(devsurv::Error::NoSignal).exit_code(),
            exit::MODEL
        );
        assert_eq!(
            CliError::from(devsurv::Error::DuplicateId("x".into())).exit_code(),
            exit::INVALID_DATA
        );
    }
}
