use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use dgcrn_core::{Config, Error, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub precision: u8,
    pub threads: usize,
    pub config: Config,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
    /// `ok`, or the error that ended the run.
    pub status: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: &Config, precision: u8, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            precision,
            threads,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: None,
            status: "running".into(),
        }
    }

    pub fn finish(&mut self, outcome: &Result<()>) {
        self.finished = Some(now());
        self.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e}"),
        };
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
