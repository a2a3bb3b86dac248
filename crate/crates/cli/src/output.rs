//! Run directories and manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliResult;

/// Overrides the default output root (`runs`).
pub const OUT_DIR_ENV: &str = "SSOT_OUT_DIR";

/// `--out` wins when given; otherwise `<root>/<default_name>` where the root
/// is `$SSOT_OUT_DIR` or `runs`.
pub fn resolve_out_dir(out: Option<&Path>, default_name: &str) -> PathBuf {
    if let Some(p) = out {
        return p.to_owned();
    }
    let root = std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(default_name)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &[String], config: &impl Serialize, seed: u64) -> Self {
        Self {
            command: command.to_vec(),
            config: serde_json::to_value(config).expect("serializable"),
            seed,
            git_describe: git_describe(),
            started_at: now(),
            finished_at: String::new(),
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    /// Stamps the end time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, status: &str, outputs: Vec<PathBuf>) -> CliResult<()> {
        self.finished_at = now();
        self.status = status.into();
        self.outputs = outputs;
        crate::write_json(&dir.join("manifest.json"), &self)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
