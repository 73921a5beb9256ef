//! Per-run manifest: everything needed to reproduce a run byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;

use crate::config::RunConfig;

pub struct Manifest {
    command: String,
    started: Instant,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Manifest { command: command.to_string(), started: Instant::now(), outputs: Vec::new() }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, config: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
        let mut cfg = serde_json::Map::new();
        for (k, v) in config.entries() {
            cfg.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        let manifest = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "outputs": self.outputs,
            "rng": "ChaCha12 substreams keyed by SHA-256(seed, label, index)",
            "wall_time_seconds": self.started.elapsed().as_secs_f64(),
        });
        let path = out_dir.join("manifest.json");
        crate::atomic_write(&path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
        Ok(path)
    }
}
