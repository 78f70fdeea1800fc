//! Atomic file output, result tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ARTIFACT: &str = "neuron-ot";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.txt";

/// Collects output files in a directory, each written by write-then-rename.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
    quiet: bool,
}

impl OutputDir {
    pub fn create(dir: &Path, quiet: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let out = Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            quiet,
        };
        out.warn_on_version_change();
        Ok(out)
    }

    fn warn_on_version_change(&self) {
        let Ok(text) = fs::read_to_string(self.dir.join(MANIFEST)) else {
            return;
        };
        let previous = text
            .lines()
            .find_map(|l| l.strip_prefix("version="))
            .unwrap_or("unknown");
        if previous != VERSION {
            eprintln!(
                "warning: {} was produced by {ARTIFACT} {previous}, this is {VERSION}",
                self.dir.display()
            );
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        if !self.quiet {
            println!("wrote {}", self.dir.join(name).display());
        }
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        self.write(name, &csv_bytes(rows)?)
    }

    /// Writes `manifest.txt` listing every file written so far.
    pub fn finish(mut self, command: &str, config_hash: &str, seeds: &[u64]) -> Result<(), CliError> {
        let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        let text = format!(
            "artifact={ARTIFACT}\nversion={VERSION}\ncommand={command}\nconfig_sha256={config_hash}\nseeds={}\nfiles={}\n",
            seeds.join(","),
            self.written.join(",")
        );
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())?;
        self.written.push(MANIFEST.into());
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
