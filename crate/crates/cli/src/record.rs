//! Per-invocation run records.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub secs: f64,
}

pub struct Timer {
    started_unix_ms: u128,
    start: Instant,
    last: Instant,
    phases: Vec<Phase>,
}

impl Timer {
    pub fn start() -> Self {
        let now = Instant::now();
        Self {
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            start: now,
            last: now,
            phases: Vec::new(),
        }
    }

    /// Closes the phase that began at the previous lap.
    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push(Phase {
            name: name.into(),
            secs: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    /// SHA-256 of the effective config, flags applied.
    pub config_hash: Option<String>,
    pub git_describe: Option<String>,
    pub started_unix_ms: u128,
    pub elapsed_secs: f64,
    pub timings: Vec<Phase>,
    pub exit_code: i32,
    pub error: Option<String>,
    pub outputs: serde_json::Value,
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

pub fn git_describe(dir: &Path) -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(dir)
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

impl RunRecord {
    pub fn finish(
        command: &str,
        argv: Vec<String>,
        config: Option<&PipelineConfig>,
        cwd: &Path,
        timer: Timer,
        exit_code: i32,
        result: &Result<serde_json::Value, CliError>,
    ) -> Self {
        Self {
            command: command.into(),
            argv,
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.map(config_hash),
            git_describe: git_describe(cwd),
            started_unix_ms: timer.started_unix_ms,
            elapsed_secs: timer.start.elapsed().as_secs_f64(),
            timings: timer.phases,
            exit_code,
            error: result.as_ref().err().map(ToString::to_string),
            outputs: result
                .as_ref()
                .ok()
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        }
    }

    /// Writes `<dir>/<started>-<command>-<pid>.json`.
    pub fn write(&self, dir: &Path) -> smokeforge::Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| smokeforge::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(format!(
            "{}-{}-{}.json",
            self.started_unix_ms,
            self.command,
            std::process::id()
        ));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        smokeforge::corpus::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
