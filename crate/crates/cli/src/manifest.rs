use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const TOOL_VERSION: &str = concat!("nar ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Record of one run. Feeding this file back through `--config` reruns the
/// stored configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub mode: String,
    /// Full configuration, defaults filled in.
    pub config: Value,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    /// Output files, relative to `out_dir`.
    pub outputs: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(subcommand: &str, mode: String, config: Value, seed: u64, workers: usize, out_dir: &Path) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            subcommand: subcommand.into(),
            mode,
            config,
            seed,
            workers,
            out_dir: out_dir.display().to_string(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            exit_code: None,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, outputs: Vec<String>, error: Option<&CliError>) {
        self.finished_at = Some(now());
        self.outputs = outputs;
        match error {
            None => {
                self.status = RunStatus::Succeeded;
                self.exit_code = Some(0);
            }
            Some(e) => {
                self.status = RunStatus::Failed;
                self.exit_code = Some(e.exit_code());
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn path(&self) -> PathBuf {
        Path::new(&self.out_dir).join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<(), CliError> {
        let path = self.path();
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }
}
