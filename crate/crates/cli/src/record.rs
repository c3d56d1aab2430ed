//! Run records and the output directory they live in.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

pub const RECORD_FILE: &str = "record.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
    /// Commit the binary was built from, when known.
    pub git: Option<String>,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git: option_env!("KDLAB_GIT_REV").map(str::to_string),
        }
    }
}

/// Everything one run produced, self-describing: the resolved config alone
/// is enough to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub config_hash: String,
    pub tool: ToolInfo,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub payload: serde_json::Value,
}

impl MetricsRecord {
    /// Equality ignoring the timestamps.
    pub fn same_run(&self, other: &Self) -> bool {
        self.experiment == other.experiment
            && self.config_hash == other.config_hash
            && self.tool == other.tool
            && self.config == other.config
            && self.payload == other.payload
    }

    /// Reads `path`, or `path/record.json` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(RECORD_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: not a run record: {e}", file.display())))
    }
}

pub fn timestamp() -> String {
    humantime::format_rfc3339_millis(SystemTime::now()).to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// An experiment's output directory. Every write goes through here so
/// nothing lands outside it and the manifest lists every file.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root,
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Atomically writes `rel` (a relative path without `..`).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let rel_path = Path::new(rel);
        if rel.is_empty() || !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(CliError::Runtime(format!("refusing to write '{rel}' outside the output directory")));
        }
        let path = self.root.join(rel_path);
        write_atomic(&path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let entry = ManifestEntry {
            path: rel.replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        };
        match self.entries.iter_mut().find(|e| e.path == entry.path) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes the manifest of everything written so far, sorted by path.
    pub fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { files: self.entries };
        let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
        text.push('\n');
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, text.as_bytes()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}
