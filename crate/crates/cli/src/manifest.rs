//! Run manifest: per-stage input fingerprints and output content hashes.
//!
//! A stage is up to date when its recorded fingerprint matches the one
//! recomputed from the current config and upstream records, and every output
//! it recorded still hashes to the stored digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage '{stage}' has not been run; run `tokenhance {command}` first")]
    Missing { stage: String, command: String },
    #[error(
        "artifact {path} from stage '{stage}' is missing or modified; rerun `tokenhance {command}`"
    )]
    Stale {
        stage: String,
        command: String,
        path: String,
    },
    #[error("stage '{stage}' was produced from different inputs or config; rerun `tokenhance {command}`")]
    Outdated { stage: String, command: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Output path relative to the run directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub completed_unix_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_unix_s() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Paths (relative to the run directory) whose hashes differ from the record
/// or that no longer exist.
pub fn changed_outputs(dir: &Path, record: &StageRecord) -> Vec<String> {
    record
        .outputs
        .iter()
        .filter(|(rel, digest)| {
            let path = dir.join(rel);
            !path.is_file() || sha256_file(&path).map_or(true, |d| &d != *digest)
        })
        .map(|(rel, _)| rel.clone())
        .collect()
}

/// Collects the files a stage writes so their hashes can be recorded.
#[derive(Debug)]
pub struct OutputSet {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputSet {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, registered as an output; parent directories are created.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(path)
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn hash_all(&self) -> Result<BTreeMap<String, String>> {
        use rayon::prelude::*;
        self.files
            .par_iter()
            .map(|rel| Ok((rel.clone(), sha256_file(&self.root.join(rel))?)))
            .collect()
    }
}
