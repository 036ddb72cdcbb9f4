//! Experiment directory: per-stage output folders, `MANIFEST.json` indexes
//! with file hashes, upstream hash chaining and a writer lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST: &str = "MANIFEST.json";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Digest of each upstream stage's manifest at the time this stage ran.
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of every output file, keyed by path relative to the stage dir.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

/// Holds the experiment lock until dropped.
#[derive(Debug)]
pub struct Experiment {
    root: PathBuf,
    lock: PathBuf,
}

impl Experiment {
    /// Creates the directory if needed and takes the writer lock.
    pub fn open(root: &Path) -> Result<Experiment> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "{} is locked by another run (remove {} if it is stale)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let _ = fs::write(&lock, std::process::id().to_string());
        Ok(Experiment { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Prepares an empty output directory; an existing non-empty one is only
    /// replaced with `force`.
    pub fn begin_stage(&self, stage: &str, force: bool) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
            if non_empty {
                if !force {
                    return Err(Error::Config(format!(
                        "output directory {} is not empty (use --force to overwrite)",
                        dir.display()
                    )));
                }
                log::warn!("--force: removing {}", dir.display());
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stage_dir(stage).join(MANIFEST).is_file()
    }

    /// Digest of a stage's manifest file.
    pub fn manifest_digest(&self, stage: &str) -> Result<String> {
        let p = self.stage_dir(stage).join(MANIFEST);
        if !p.is_file() {
            return Err(Error::MissingArtifact(format!("stage '{stage}' has not been run ({} missing)", p.display())));
        }
        sha256_file(&p)
    }

    pub fn read_manifest(&self, stage: &str) -> Result<StageManifest> {
        let p = self.stage_dir(stage).join(MANIFEST);
        if !p.is_file() {
            return Err(Error::MissingArtifact(format!("stage '{stage}' has not been run ({} missing)", p.display())));
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads an upstream stage and checks that its files and its own
    /// upstream links are unchanged.
    pub fn require(&self, stage: &str) -> Result<StageManifest> {
        let m = self.read_manifest(stage)?;
        let dir = self.stage_dir(stage);
        for (rel, hash) in &m.files {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(Error::MissingArtifact(format!("{} listed in {stage}/{MANIFEST}", p.display())));
            }
            if &sha256_file(&p)? != hash {
                return Err(Error::HashMismatch(format!("{} changed since stage '{stage}' ran", p.display())));
            }
        }
        for (up, digest) in &m.upstream {
            if self.has_stage(up) && &self.manifest_digest(up)? != digest {
                return Err(Error::HashMismatch(format!(
                    "stage '{up}' was rerun after '{stage}'; rerun '{stage}' first"
                )));
            }
        }
        Ok(m)
    }

    /// Hashes every file in the stage directory and writes its manifest.
    pub fn finish_stage(&self, stage: &str, config_hash: &str, seed: u64, upstream: &[&str]) -> Result<StageManifest> {
        let dir = self.stage_dir(stage);
        let mut rels = Vec::new();
        walk(&dir, &dir, &mut rels)?;
        let mut files = BTreeMap::new();
        for rel in rels {
            if rel.as_os_str() == MANIFEST {
                continue;
            }
            let key = rel.to_string_lossy().replace('\\', "/");
            files.insert(key, sha256_file(&dir.join(&rel))?);
        }
        let mut up = BTreeMap::new();
        for u in upstream {
            up.insert(u.to_string(), self.manifest_digest(u)?);
        }
        let m = StageManifest {
            stage: stage.to_string(),
            code_version: crate::CODE_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            upstream: up,
            files,
        };
        let p = dir.join(MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(m)
    }
}

impl Drop for Experiment {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let a = Experiment::open(tmp.path()).unwrap();
        assert!(matches!(Experiment::open(tmp.path()), Err(Error::Config(_))));
        drop(a);
        Experiment::open(tmp.path()).unwrap();
    }

    #[test]
    fn non_empty_stage_needs_force() {
        let tmp = tempfile::tempdir().unwrap();
        let exp = Experiment::open(tmp.path()).unwrap();
        let d = exp.begin_stage("s", false).unwrap();
        fs::write(d.join("x"), "1").unwrap();
        assert!(exp.begin_stage("s", false).is_err());
        let d = exp.begin_stage("s", true).unwrap();
        assert!(!d.join("x").exists());
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let exp = Experiment::open(tmp.path()).unwrap();
        let a = exp.begin_stage("a", false).unwrap();
        fs::create_dir_all(a.join("sub")).unwrap();
        fs::write(a.join("sub/f.txt"), "one").unwrap();
        let m = exp.finish_stage("a", "h", 1, &[]).unwrap();
        assert!(m.files.contains_key("sub/f.txt"));
        exp.require("a").unwrap();

        let b = exp.begin_stage("b", false).unwrap();
        fs::write(b.join("g.txt"), "two").unwrap();
        exp.finish_stage("b", "h", 1, &["a"]).unwrap();
        exp.require("b").unwrap();

        // rerunning a makes b stale
        fs::write(a.join("sub/f.txt"), "changed").unwrap();
        assert!(matches!(exp.require("a"), Err(Error::HashMismatch(_))));
        exp.finish_stage("a", "h", 1, &[]).unwrap();
        assert!(matches!(exp.require("b"), Err(Error::HashMismatch(_))));
        assert!(matches!(exp.require("c"), Err(Error::MissingArtifact(_))));
    }
}
