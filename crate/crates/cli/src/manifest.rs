//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tor_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub engine_version: String,
    pub config: TrainConfig,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `running`, `ok`, `diverged` or `failed`.
    pub status: String,
    pub files: Vec<FileEntry>,
}

/// `$TOR_OUTPUT_DIR`, or `runs` under the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os("TOR_OUTPUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn default_run_id(prefix: &str) -> String {
    format!("{prefix}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3f"))
}

/// Keeps ids usable as directory and file names.
pub fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

/// Creates `root/<run_id>`; refuses to reuse an existing directory.
pub fn create_run_dir(root: &Path, run_id: &str) -> CliResult<PathBuf> {
    let dir = root.join(run_id);
    if dir.exists() {
        return Err(CliError::Config(format!("run directory `{}` already exists", dir.display())));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn sha256_file(path: &Path) -> CliResult<(u64, String)> {
    let bytes = fs::read(path)?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<FileEntry>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(&path, base, out)?;
            continue;
        }
        let rel = path.strip_prefix(base).expect("walked under base");
        if rel == Path::new(MANIFEST) {
            continue;
        }
        let (bytes, sha256) = sha256_file(&path)?;
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        out.push(FileEntry { path: parts.join("/"), bytes, sha256 });
    }
    Ok(())
}

impl RunManifest {
    pub fn new(run_id: &str, command: &str, config: &TrainConfig) -> Self {
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            started_at: now(),
            finished_at: None,
            status: "running".to_string(),
            files: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    /// Re-digests every file under `dir` and records the final status.
    pub fn finalize(&mut self, dir: &Path, status: &str) -> CliResult<()> {
        let mut files = Vec::new();
        walk(dir, dir, &mut files)?;
        self.files = files;
        self.status = status.to_string();
        self.finished_at = Some(now());
        self.write(dir)
    }
}
