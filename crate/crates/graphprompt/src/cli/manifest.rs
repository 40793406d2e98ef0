//! Every command writes a manifest into its output directory before any
//! heavy work starts, so an interrupted run still records what it was
//! trying to do and a finished run can be replayed exactly.

use super::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub revision: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub out_dir: String,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Best-effort identifier for the code that produced a run.
pub fn source_revision() -> String {
    if let Ok(rev) = std::env::var("GRAPHPROMPT_REVISION") {
        if !rev.is_empty() {
            return rev;
        }
    }
    let out = Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output();
    if let Ok(out) = out {
        if out.status.success() {
            let rev = String::from_utf8_lossy(&out.stdout).trim().to_string();
            if !rev.is_empty() {
                return rev;
            }
        }
    }
    "unknown".to_string()
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, out_dir: &Path, config: &RunConfig) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed,
            revision: source_revision(),
            started_unix: now_unix(),
            finished_unix: None,
            out_dir: out_dir.display().to_string(),
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = Self::path(out_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Record the produced artifacts and the finish time, then rewrite.
    pub fn finish(&mut self, out_dir: &Path, artifacts: &[&Path]) -> Result<()> {
        self.artifacts = artifacts
            .iter()
            .map(|p| {
                p.strip_prefix(out_dir)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect();
        for p in artifacts {
            if !p.exists() {
                return Err(Error::Argument(format!(
                    "declared artifact {} does not exist",
                    p.display()
                )));
            }
        }
        self.finished_unix = Some(now_unix());
        self.write(out_dir)
    }

    pub fn load(out_dir: &Path) -> Result<RunManifest> {
        let path = Self::path(out_dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}
