//! Atomic file output, CSV formatting and run manifests.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Shortest round-trip representation; `inf`/`nan` spelled out.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

/// Fields must not contain commas, quotes or newlines; ours never do.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        let mut first = true;
        for f in fields {
            if !first {
                self.text.push(',');
            }
            first = false;
            debug_assert!(!f.as_ref().contains([',', '\n', '"']));
            self.text.push_str(f.as_ref());
        }
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_version: u32,
    pub checkpoint_version: u32,
    pub files: Vec<FileEntry>,
    pub config: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Tracks the files a command produced so the manifest can list them.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: vec![] }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.files.push(FileEntry { name: name.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn csv(&mut self, name: &str, csv: &Csv) -> Result<()> {
        self.bytes(name, csv.as_str().as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        s.push('\n');
        self.bytes(name, s.as_bytes())
    }

    /// Writes `manifest_<command>.json` listing everything written so far.
    pub fn finish(self, command: &str, config_hash: &str, seed: u64, config: &str) -> Result<()> {
        let m = Manifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            dataset_version: dmldbp::ldbp::DATASET_VERSION,
            checkpoint_version: dmldbp::ldbp::CHECKPOINT_VERSION,
            files: self.files,
            config: config.into(),
        };
        let mut s = serde_json::to_string_pretty(&m).map_err(|e| CliError::Config(e.to_string()))?;
        s.push('\n');
        write_atomic(&self.dir.join(format!("manifest_{command}.json")), s.as_bytes())
    }
}

/// Wall-clock times, kept out of every hashed artifact.
#[derive(Debug, Default)]
pub struct Timings {
    rows: Vec<(String, f64)>,
}

impl Timings {
    pub fn push(&mut self, label: impl Into<String>, seconds: f64) {
        self.rows.push((label.into(), seconds));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = String::from("cell,wall_time_s\n");
        for (l, t) in &self.rows {
            let _ = writeln!(s, "{l},{t:.3}");
        }
        write_atomic(&dir.join("timings.csv"), s.as_bytes())
    }
}
