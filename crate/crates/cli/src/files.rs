//! Atomic output files, content digests and the run manifest.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn temp_beside(path: &Path) -> Result<NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))
}

/// Output that only appears under its final name once complete.
pub struct AtomicFile {
    tmp: BufWriter<NamedTempFile>,
    path: PathBuf,
}

impl AtomicFile {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(AtomicFile {
            tmp: BufWriter::new(temp_beside(path)?),
            path: path.to_path_buf(),
        })
    }

    pub fn commit(self) -> Result<PathBuf> {
        let tmp = self.tmp.into_inner().map_err(|e| e.into_error())?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).with_context(|| format!("renaming into {}", self.path.display()))?;
        Ok(self.path)
    }
}

impl Write for AtomicFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tmp.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.tmp.flush()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = AtomicFile::create(path)?;
    f.write_all(bytes)?;
    f.commit()?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn open_input(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| ovsg_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

/// Record of one command invocation: enough to rerun it and to check that
/// inputs and outputs are the ones it saw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub elapsed_secs: Option<f64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A manifest being filled in during a run. It is written when the run
/// starts and rewritten when it ends.
pub struct ManifestGuard {
    path: Option<PathBuf>,
    manifest: RunManifest,
    start: Instant,
}

impl ManifestGuard {
    pub fn start(path: Option<PathBuf>, command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        // Hashing reads every input once more, so skip it when nothing will
        // record the digests (it would also drain a pipe given as input).
        let inputs = inputs
            .iter()
            .filter(|_| path.is_some())
            .map(|p| Ok(FileDigest { path: p.to_path_buf(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            inputs,
            outputs: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_secs: None,
            status: RunStatus::Running,
            error: None,
        };
        let guard = ManifestGuard { path, manifest, start: Instant::now() };
        guard.write()?;
        Ok(guard)
    }

    fn write(&self) -> Result<()> {
        if let Some(p) = &self.path {
            write_json_atomic(p, &self.manifest)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        if self.path.is_none() {
            return Ok(());
        }
        self.manifest.outputs.push(FileDigest { path: path.to_path_buf(), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn finish(mut self, outcome: &Result<u8>) -> Result<()> {
        self.manifest.elapsed_secs = Some(self.start.elapsed().as_secs_f64());
        match outcome {
            Ok(0) => self.manifest.status = RunStatus::Ok,
            Ok(code) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("exit code {code}"));
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }
}
