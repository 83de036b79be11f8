//! Run manifests: one JSON document per run recording what was executed,
//! with which configuration, over which data, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pi_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command_line: Vec<String>,
    /// Fully resolved config document as it governed this run.
    pub config: String,
    /// Relative dataset path → SHA-256 of file contents.
    pub dataset_checksums: BTreeMap<String, String>,
    pub code_version: String,
    /// Unix seconds; both zero under `--fixed-clock`.
    pub started_at: f64,
    pub finished_at: f64,
    /// Every artifact this run produced, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(run_id: &str, config: String, fixed_clock: bool) -> RunManifest {
        RunManifest {
            run_id: run_id.to_string(),
            command_line: std::env::args().collect(),
            config,
            dataset_checksums: BTreeMap::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: if fixed_clock { 0.0 } else { unix_now() },
            finished_at: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, out_dir: &Path, path: &Path) {
        self.outputs.push(relative_to(out_dir, path));
    }

    /// Stamps the end time and writes the manifest JSON, returning its path.
    pub fn finish(mut self, out_dir: &Path, fixed_clock: bool) -> Result<PathBuf> {
        self.finished_at = if fixed_clock { 0.0 } else { unix_now() };
        if fixed_clock {
            // argv[0] is an absolute target path that varies across hosts
            self.command_line = normalize_argv(self.command_line);
        }
        let path = out_dir.join(format!("manifest-{}.json", self.run_id));
        self.outputs.push(relative_to(out_dir, &path));
        self.outputs.sort();
        self.outputs.dedup();
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, json)?;
        Ok(path)
    }
}

fn normalize_argv(mut argv: Vec<String>) -> Vec<String> {
    if let Some(first) = argv.first_mut() {
        let base = Path::new(first.as_str())
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| first.clone());
        *first = base;
    }
    argv
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn relative_to(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))
}
