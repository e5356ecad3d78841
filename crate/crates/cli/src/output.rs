use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Sidecar describing the run that produced the files next to it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    /// True when the seed was drawn from system entropy rather than given.
    pub seed_from_entropy: bool,
    pub tool_version: String,
    pub timestamp: String,
    pub outputs: Vec<FileDigest>,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects artifacts for one run and writes them atomically.
pub struct Outputs {
    dir: PathBuf,
    command: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    seed: Option<u64>,
    seed_from_entropy: bool,
}

impl Outputs {
    pub fn new(dir: &Path, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            seed_from_entropy: false,
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: digest(&bytes),
        });
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64, from_entropy: bool) {
        self.seed = Some(seed);
        self.seed_from_entropy = from_entropy;
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = write_atomic(&self.dir, name, bytes)?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: digest(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::failure(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` listing every artifact written so far.
    pub fn finish(self) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            inputs: self.inputs,
            seed: self.seed,
            seed_from_entropy: self.seed_from_entropy,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: Utc::now().to_rfc3339(),
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::failure(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&self.dir, "manifest.json", &bytes)?;
        Ok(())
    }
}

/// Temp file in the target directory, then rename, so readers never see a partial file.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(&path, e))?;
    tmp.persist(&path).map_err(|e| CliError::io(&path, e.error))?;
    Ok(path)
}

/// CSV text from a header and rows.
pub fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::failure(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::failure(e.to_string()))
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
