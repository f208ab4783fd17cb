//! The output directory: a lock held for the duration of one command, and a
//! manifest recording, for every artifact, the command and configuration
//! hash that produced it and the content hashes of its inputs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".devsurv.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub command: String,
    pub config_hash: String,
    pub sha256: String,
    /// Input path to content hash at the time the artifact was written.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Which command writes an artifact, for "run X first" hints.
fn producer(name: &str) -> &'static str {
    let stem = name.split('.').next().unwrap_or(name);
    match stem {
        "notes" => "ingest",
        "sentences" | "splits" => "tag",
        "candidates" => "candidates",
        "label_matrix" => "lf apply",
        "labels" | "label_model" => "labelmodel fit",
        "model" => "train",
        "predictions" => "predict",
        "cohort" | "coded_events" => "cohort",
        "events" | "text_events" => "events merge",
        "cox" => "survival cox",
        _ => "the producing command",
    }
}

pub struct Workspace {
    dir: PathBuf,
    command: String,
    config_hash: String,
    manifest: BTreeMap<String, ArtifactRecord>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(String, String)>,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(dir: &Path, command: &str, config_hash: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{} {}", std::process::id(), command);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked {
                    dir: dir.to_path_buf(),
                    lock,
                })
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        let mut ws = Workspace {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            manifest: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            lock,
        };
        let path = ws.dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            ws.manifest = serde_json::from_str(&text)
                .map_err(|e| devsurv::Error::Format(format!("{}: {e}", path.display())))?;
        }
        Ok(ws)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an external input file (must exist).
    pub fn external(&mut self, path: &Path) -> CliResult<PathBuf> {
        crate::config::require(path, "input")?;
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    /// Resolves an upstream artifact in the output directory, warning when it
    /// was produced under another configuration or its own inputs changed.
    pub fn artifact(&mut self, name: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::missing(
                &path,
                format!("run `devsurv {}` first", producer(name)),
            ));
        }
        if let Some(rec) = self.manifest.get(name) {
            if rec.config_hash != self.config_hash {
                log::warn!(
                    "{name} was produced by `{}` under a different configuration",
                    rec.command
                );
            }
            for (input, hash) in &rec.inputs {
                match sha256_file(Path::new(input)) {
                    Ok(h) if &h == hash => {}
                    Ok(_) => log::warn!(
                        "{name} is stale: its input {input} changed since `{}` ran",
                        rec.command
                    ),
                    Err(_) => log::warn!("{name} is stale: its input {input} is gone"),
                }
            }
        }
        self.inputs
            .insert(path.display().to_string(), sha256_file(&path)?);
        Ok(path)
    }

    pub fn has_artifact(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, name: &str) -> CliResult<T> {
        let path = self.artifact(name)?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| devsurv::Error::Format(format!("{}: {e}", path.display())).into())
    }

    pub fn read_jsonl<T: DeserializeOwned>(&mut self, name: &str) -> CliResult<Vec<T>> {
        let path = self.artifact(name)?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    CliError::from(devsurv::Error::MalformedRecord {
                        line: i + 1,
                        field: None,
                        message: format!("{}: {e}", path.display()),
                    })
                })
            })
            .collect()
    }

    pub fn open_artifact(&mut self, name: &str) -> CliResult<File> {
        let path = self.artifact(name)?;
        File::open(&path).map_err(|e| CliError::io(&path, e))
    }

    /// Writes an artifact through a buffer; the file is replaced atomically.
    pub fn write_with(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> devsurv::Result<()>,
    ) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        self.outputs
            .push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| devsurv::Error::Format(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r)
                .map_err(|e| devsurv::Error::Format(e.to_string()))?;
            buf.push(b'\n');
        }
        self.write_bytes(name, &buf)
    }

    /// Saves the manifest entries for this command's outputs.
    pub fn finish(mut self) -> CliResult<()> {
        let outputs = std::mem::take(&mut self.outputs);
        for (name, sha256) in outputs {
            let mut inputs = self.inputs.clone();
            inputs.remove(&self.path(&name).display().to_string());
            self.manifest.insert(
                name,
                ArtifactRecord {
                    command: self.command.clone(),
                    config_hash: self.config_hash.clone(),
                    sha256,
                    inputs,
                },
            );
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| devsurv::Error::Format(e.to_string()))?;
        text.push('\n');
        let path = self.path(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_open_is_locked_until_drop() {
        let dir = tempfile::tempdir().unwrap();
        let a = Workspace::open(dir.path(), "x", "h").unwrap();
        assert!(matches!(
            Workspace::open(dir.path(), "y", "h"),
            Err(CliError::Locked { .. })
        ));
        drop(a);
        Workspace::open(dir.path(), "y", "h").unwrap();
    }

    #[test]
    fn manifest_records_inputs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "abc").unwrap();
        let run = || {
            let mut ws = Workspace::open(&dir.path().join("out"), "cmd", "h1").unwrap();
            ws.external(&input).unwrap();
            ws.write_bytes("a.txt", b"hello").unwrap();
            ws.finish().unwrap();
            fs::read(dir.path().join("out").join(MANIFEST_FILE)).unwrap()
        };
        let first = run();
        assert_eq!(first, run());
        let m: BTreeMap<String, ArtifactRecord> = serde_json::from_slice(&first).unwrap();
        assert_eq!(m["a.txt"].inputs.len(), 1);
        assert_eq!(m["a.txt"].sha256, hex::encode(Sha256::digest(b"hello")));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path(), "train", "h").unwrap();
        match ws.artifact("labels.pain-anatomy.csv") {
            Err(CliError::MissingInput { hint, .. }) => {
                assert!(hint.unwrap().contains("labelmodel fit"))
            }
            other => panic!("{other:?}"),
        }
    }
}
