//! Run directories and their `manifest.json`: written when a run starts,
//! rewritten with output hashes and status when it ends.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<FileHash> {
    let mut f = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
        bytes,
    })
}

fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

/// `root/<UTC timestamp>`, suffixed if that directory already exists.
pub fn fresh_run_dir(root: &Path) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut dir = root.join(&stamp);
    let mut i = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{i}"));
        i += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// A manifest being tracked on disk for one run.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Hashes `inputs` and writes the initial manifest into `dir`.
    pub fn begin(
        dir: &Path,
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
        inputs: &[&Path],
    ) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs.iter().map(|p| sha256_file(p)).collect::<Result<Vec<_>>>()?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                args,
                config,
                seeds,
                inputs,
                outputs: Vec::new(),
                started_at: now(),
                finished_at: None,
                status: RunStatus::Running,
                error: None,
            },
        };
        run.write()?;
        Ok(run)
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    fn write(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path(), json + "\n").with_context(|| format!("writing {}", self.path().display()))
    }

    /// Records output hashes and the outcome. Missing outputs are skipped
    /// so a failed run still lists what it produced.
    pub fn finish(mut self, outputs: &[PathBuf], error: Option<&anyhow::Error>) -> Result<RunManifest> {
        self.manifest.outputs = outputs
            .iter()
            .filter(|p| p.exists())
            .map(|p| sha256_file(p))
            .collect::<Result<Vec<_>>>()?;
        self.manifest.finished_at = Some(now());
        self.manifest.status = if error.is_some() { RunStatus::Failed } else { RunStatus::Succeeded };
        self.manifest.error = error.map(|e| format!("{e:#}"));
        self.write()?;
        Ok(self.manifest)
    }
}
