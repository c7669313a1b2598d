use std::path::{Path, PathBuf};
use std::time::Instant;

use cimlite::Result;
use serde::Serialize;

/// Provenance record; one per command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub version: String,
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn artifact(&mut self, p: PathBuf) -> PathBuf {
        self.artifacts.push(p.clone());
        p
    }

    /// Write `<command>.manifest.json` into `out_dir`.
    pub fn finish(self, out_dir: &Path, config: serde_json::Value, seed: u64) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            inputs: self.inputs,
            artifacts: self.artifacts,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        };
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}
