//! Artifact writers: CSV tables, the run summary, and the manifest.
//!
//! Floats are written in shortest round-trip form, which is deterministic,
//! and absent values are empty cells; a non-finite value is spelled out
//! (`nan`, `inf`) rather than silently propagated.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn fmt(value: f64) -> String {
    if value.is_nan() {
        "nan".into()
    } else if value.is_infinite() {
        if value > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{value}")
    }
}

pub fn fmt_opt(value: Option<f64>) -> String {
    value.map(fmt).unwrap_or_default()
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(path)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            root: path.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut writer = csv::Writer::from_path(self.path(name))?;
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush().map_err(CliError::from)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.path(name), text + "\n").map_err(CliError::from)
    }

    /// Writes the manifest: config echo, seed, and code version.
    pub fn write_manifest<T: Serialize>(&self, config: &T, seed: u64) -> CliResult<()> {
        let manifest = serde_json::json!({
            "config": serde_json::to_value(config)?,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        self.write_json("manifest.json", &manifest)
    }
}
