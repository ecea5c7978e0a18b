//! Per-invocation run manifest.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cache::{sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub debug_assertions: bool,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

/// Identity, configuration and timing of one command invocation. Only this
/// file carries wall-clock data; every other artifact is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub environment: Environment,
    pub started_unix: f64,
    #[serde(default)]
    pub finished_unix: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Stable id from the command and its configuration snapshot.
pub fn experiment_id(command: &str, config: &serde_json::Value) -> String {
    let mut bytes = command.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend(serde_json::to_vec(config).expect("json value serializes"));
    sha256_hex(&bytes)[..16].to_string()
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        Self {
            experiment_id: experiment_id(command, &config),
            command: command.to_string(),
            config,
            environment: Environment::current(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn finish(&mut self, path: &Path) -> std::io::Result<()> {
        self.finished_unix = Some(now());
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}
