//! Run manifests: what a command read, wrote and with which seeds.
//!
//! A command writing a single file records `<file>.run.json` next to it; a
//! command writing a directory records `<dir>/run.json`. Before reading an
//! input, commands look for the manifest that produced it and refuse to run
//! when the file no longer matches the recorded digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::digest::file_sha256;
use crate::io::{read_json, write_json};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DIR_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
            bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub tool_version: String,
    pub config_digest: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_time_ms: f64,
}

/// Collects a manifest while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: Vec<String>) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command,
                tool_version: TOOL_VERSION.to_string(),
                config_digest: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                seeds: BTreeMap::new(),
                wall_time_ms: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn config_digest(&mut self, digest: impl Into<String>) {
        self.manifest.config_digest = Some(digest.into());
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    /// Checks an input against the manifest that produced it and records it.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = verify_input(path)?;
        self.manifest.inputs.push(d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn finish(mut self) -> RunManifest {
        self.manifest.wall_time_ms = self.started.elapsed().as_secs_f64() * 1e3;
        self.manifest
    }

    /// Writes `<file>.run.json` and returns its path.
    pub fn write_for_file(self, output: &Path) -> Result<PathBuf> {
        let path = sidecar_path(output);
        write_json(&path, &self.finish())?;
        Ok(path)
    }

    /// Writes `<dir>/run.json` and returns its path.
    pub fn write_for_dir(self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(DIR_MANIFEST);
        write_json(&path, &self.finish())?;
        Ok(path)
    }
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    output.with_file_name(name)
}

/// The manifest recording `path` as an output, if any.
pub fn producer_of(path: &Path) -> Result<Option<RunManifest>> {
    let side = sidecar_path(path);
    if side.is_file() {
        return Ok(Some(read_json(&side)?));
    }
    let dir_manifest = path.parent().map(|d| d.join(DIR_MANIFEST));
    if let Some(m) = dir_manifest.filter(|m| m.is_file()) {
        let manifest: RunManifest = read_json(&m)?;
        if find_output(&manifest, path).is_some() {
            return Ok(Some(manifest));
        }
    }
    Ok(None)
}

fn find_output<'a>(manifest: &'a RunManifest, path: &Path) -> Option<&'a FileDigest> {
    let name = path.file_name()?;
    manifest
        .outputs
        .iter()
        .find(|o| Path::new(&o.path).file_name() == Some(name))
}

/// Digests `path`, failing with [`Error::StaleInput`] when a producing
/// manifest recorded different contents.
pub fn verify_input(path: &Path) -> Result<FileDigest> {
    if !path.exists() {
        return Err(Error::Invalid(format!("input {} does not exist", path.display())));
    }
    let current = FileDigest::of(path)?;
    if let Some(manifest) = producer_of(path)? {
        if let Some(recorded) = find_output(&manifest, path) {
            if recorded.sha256 != current.sha256 {
                return Err(Error::StaleInput {
                    path: path.to_path_buf(),
                    expected: recorded.sha256.clone(),
                    actual: current.sha256,
                });
            }
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("a/b.jsonl")), PathBuf::from("a/b.jsonl.run.json"));
    }

    #[test]
    fn stale_input_detected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.jsonl");
        std::fs::write(&out, "one\n").unwrap();
        let mut b = ManifestBuilder::new(vec!["test".into()]);
        b.output(&out).unwrap();
        b.write_for_file(&out).unwrap();
        assert!(verify_input(&out).is_ok());
        std::fs::write(&out, "two\n").unwrap();
        assert!(matches!(verify_input(&out), Err(Error::StaleInput { .. })));
    }

    #[test]
    fn directory_manifest_covers_members() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("train.jsonl");
        std::fs::write(&a, "a\n").unwrap();
        let mut b = ManifestBuilder::new(vec!["split".into()]);
        b.output(&a).unwrap();
        b.write_for_dir(dir.path()).unwrap();
        std::fs::write(&a, "b\n").unwrap();
        assert!(verify_input(&a).is_err());
        let other = dir.path().join("unrelated.txt");
        std::fs::write(&other, "z").unwrap();
        assert!(verify_input(&other).is_ok());
    }
}
