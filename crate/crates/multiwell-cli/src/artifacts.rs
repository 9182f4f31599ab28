//! Output directory handling, artifact writers, and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multiwell::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Output directory: `--out` flag, then the `MULTIWELL_OUT` environment
/// variable, then `./out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var("MULTIWELL_OUT") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("out"),
    }
}

/// Collects one run's artifacts and assembles its manifest.
///
/// Every write is remembered so `manifest.json` can list each output file.
/// Apart from the manifest's wall-clock field, every byte written through
/// this struct is a pure function of (config, seed, subcommand, flags).
pub struct Artifacts {
    dir: PathBuf,
    outputs: Vec<String>,
    started: Instant,
}

impl Artifacts {
    pub fn create(dir: PathBuf) -> Result<Artifacts> {
        fs::create_dir_all(&dir)?;
        Ok(Artifacts {
            dir,
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.dir.join(name), text)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Comma-separated series file: a header row, then one row per record.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::with_capacity(header.len() + 1 + rows.len() * 32);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    /// Pretty-printed JSON report. Non-finite floats serialize as `null`;
    /// series that may contain them also ship as CSV, where they print as
    /// `inf`/`NaN`.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Write `manifest.json` and return its path. `wall_clock_seconds` is
    /// the one field that may differ between reruns of an identical
    /// configuration; it sits on its own line so comparisons can drop it.
    pub fn finish(
        self,
        subcommand: &str,
        config_text: &str,
        seed: u64,
        params: serde_json::Value,
    ) -> Result<PathBuf> {
        let manifest = serde_json::json!({
            "tool": "multiwell",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "config_sha256": sha256_hex(config_text),
            "seed": seed,
            "params": params,
            "outputs": self.outputs,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(digest.len() * 2);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}
