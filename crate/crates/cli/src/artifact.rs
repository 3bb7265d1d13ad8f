//! Atomic artifact output with a manifest next to every file.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

pub const TOOL_NAME: &str = "rvr";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the canonical JSON form of a settings value.
pub fn config_hash<T: Serialize>(settings: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(settings)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Everything a manifest records besides the artifact itself.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub settings: serde_json::Value,
}

impl Provenance {
    pub fn new<T: Serialize>(
        command: &str,
        seed: u64,
        inputs: Vec<InputRecord>,
        settings: &T,
    ) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            inputs,
            settings: serde_json::to_value(settings)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub artifact: String,
    pub sha256: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub settings: serde_json::Value,
}

impl Manifest {
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn read(artifact: &Path) -> Result<Self> {
        let p = Self::path_for(artifact);
        let text =
            std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Collects outputs in temporary files beside their targets and moves them
/// into place only on [`Staging::commit`]. Dropping an uncommitted staging
/// area deletes everything it wrote.
#[derive(Default)]
pub struct Staging {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staging {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, target: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match target.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut tmp = NamedTempFile::new_in(&dir)
            .with_context(|| format!("creating temporary file in {}", dir.display()))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.flush())
            .with_context(|| format!("writing {}", target.display()))?;
        self.files.push((tmp, target.to_path_buf()));
        Ok(())
    }

    /// Stages `bytes` at `target` plus its manifest.
    pub fn add_artifact(&mut self, target: &Path, bytes: &[u8], prov: &Provenance) -> Result<()> {
        let manifest = Manifest {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            command: prov.command.clone(),
            artifact: target
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(bytes),
            config_hash: sha256_hex(&serde_json::to_vec(&prov.settings)?),
            seed: prov.seed,
            inputs: prov.inputs.clone(),
            settings: prov.settings.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        self.add(target, bytes)?;
        self.add(&Manifest::path_for(target), text.as_bytes())
    }

    pub fn commit(self) -> Result<()> {
        let mut done: Vec<PathBuf> = Vec::new();
        for (tmp, target) in self.files {
            if let Err(e) = tmp.persist(&target) {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e.error)
                    .with_context(|| format!("moving output into {}", target.display()));
            }
            done.push(target);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("a.txt");
        {
            let mut s = Staging::new();
            s.add(&target, b"hello").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_writes_artifact_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("sub").join("model.bin");
        let prov = Provenance::new("train", 7, vec![], &serde_json::json!({"lr": 0.1})).unwrap();
        let mut s = Staging::new();
        s.add_artifact(&target, b"abc", &prov).unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), b"abc");
        let m = Manifest::read(&target).unwrap();
        assert_eq!(m.sha256, sha256_hex(b"abc"));
        assert_eq!(m.seed, 7);
        assert_eq!(m.artifact, "model.bin");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
