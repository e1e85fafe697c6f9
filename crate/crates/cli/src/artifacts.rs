//! Stage directories, manifests and the output-directory lock.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever an artifact format changes.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Load,
    TrainEmbeddings,
    MineRules,
    Retrieve,
    TrainAdapter,
    Predict,
    Evaluate,
    Grid,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::TrainEmbeddings => "train-embeddings",
            Stage::MineRules => "mine-rules",
            Stage::Retrieve => "retrieve",
            Stage::TrainAdapter => "train-adapter",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Grid => "grid",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Load => "graph",
            Stage::TrainEmbeddings => "embeddings",
            Stage::MineRules => "rules",
            Stage::Retrieve => "subgraphs",
            Stage::TrainAdapter => "adapter",
            Stage::Predict => "predictions",
            Stage::Evaluate => "evaluation",
            Stage::Grid => "grid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileHash {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn read(dir: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    /// Every recorded output still exists with its recorded hash.
    pub fn outputs_intact(&self) -> bool {
        self.outputs
            .iter()
            .all(|f| sha256_file(&f.path).map(|h| h == f.sha256).unwrap_or(false))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Held while a command writes into an output directory.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(out: &Path) -> Result<Lock> {
        fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        let path = out.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run; delete {} if no other run is active",
                out.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot create {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = Lock::acquire(dir.path()).unwrap();
        let err = Lock::acquire(dir.path()).unwrap_err().to_string();
        assert!(err.contains("locked"));
        drop(lock);
        Lock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tampered_output_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        fs::write(&p, "one").unwrap();
        let m = Manifest {
            stage: "load".into(),
            version: ARTIFACT_VERSION,
            config_hash: String::new(),
            seed: 0,
            inputs: vec![],
            outputs: vec![FileHash::of(&p).unwrap()],
        };
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        assert!(m.outputs_intact());
        fs::write(&p, "two").unwrap();
        assert!(!m.outputs_intact());
    }
}
