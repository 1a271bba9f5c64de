//! Run manifests and atomic output writing.
//!
//! Every command leaves a `<primary output>.manifest.json` beside its main
//! artifact recording the full command line, the effective config, content
//! digests of every input file, and start/end timestamps, so any output can
//! be traced back to exactly what produced it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tse_core::{Error, Result};

/// Write a file atomically: content goes to a temp file in the target's
/// directory and is renamed into place only after a successful flush, so an
/// interrupted run never leaves a truncated artifact.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file_mut().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command_line: Vec<String>,
    started_utc: String,
    finished_utc: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    inputs: BTreeMap<String, String>,
}

/// Collects manifest data over a command's lifetime; created before any
/// work starts so the timestamps bracket the whole run.
pub struct ManifestBuilder {
    started: DateTime<Utc>,
    seed: Option<u64>,
    config: Option<serde_json::Value>,
    inputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new() -> Self {
        ManifestBuilder {
            started: Utc::now(),
            seed: None,
            config: None,
            inputs: BTreeMap::new(),
        }
    }

    /// Record an input file by its SHA-256 content digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let mut file = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 65536];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let digest = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config =
            Some(serde_json::to_value(config).map_err(|e| Error::Io(std::io::Error::other(e)))?);
        Ok(())
    }

    /// Emit `<primary>.manifest.json` next to the primary output.
    pub fn write_beside(self, primary: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            tool: "tse",
            version: env!("CARGO_PKG_VERSION"),
            command_line: std::env::args().collect(),
            started_utc: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_utc: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
        };
        let mut name = primary
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".manifest.json");
        let path = primary.with_file_name(name);
        write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(w)?;
            Ok(())
        })?;
        Ok(path)
    }
}
