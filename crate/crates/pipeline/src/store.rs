//! Content-addressed artifact directory with a JSON manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What a stage consumed and produced on its last run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub params: BTreeMap<String, String>,
    /// Input name (raw file or upstream artifact) to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    /// Every artifact file with its hash.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|r| r.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }
}

/// Held while a run owns the store; the lock file is removed on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    data_dir: PathBuf,
}

impl ArtifactStore {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ArtifactStore {
            data_dir: data_dir.into(),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn inputs_dir(&self) -> PathBuf {
        self.data_dir.join("inputs")
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.data_dir.join("artifacts")
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.artifacts_dir().join(name)
    }

    pub fn input_path(&self, name: &str) -> PathBuf {
        self.inputs_dir().join(name)
    }

    pub fn lock(&self) -> Result<StoreLock> {
        let dir = self.artifacts_dir();
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(PipelineError::io(path, e)),
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.artifact_path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        self.write_atomic(&self.artifact_path(MANIFEST_FILE), text.as_bytes())
    }

    /// Writes an artifact and returns its hash.
    pub fn write_artifact(&self, name: &str, bytes: &[u8]) -> Result<String> {
        self.write_atomic(&self.artifact_path(name), bytes)?;
        Ok(sha256_hex(bytes))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }

    /// Reads an artifact after checking its bytes against the manifest hash.
    pub fn read_verified(&self, manifest: &Manifest, name: &str) -> Result<Vec<u8>> {
        let expected = manifest
            .stages
            .values()
            .find_map(|r| r.outputs.get(name))
            .ok_or_else(|| PipelineError::Config(format!("artifact {name} is not in the manifest")))?;
        let path = self.artifact_path(name);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(PipelineError::Corrupt {
                path,
                expected: expected.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn read_verified_string(&self, manifest: &Manifest, name: &str) -> Result<String> {
        let bytes = self.read_verified(manifest, name)?;
        String::from_utf8(bytes).map_err(|_| PipelineError::Corrupt {
            path: self.artifact_path(name),
            expected: "UTF-8 text".into(),
            actual: "invalid UTF-8".into(),
        })
    }
}
