use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::domain::ControlKind;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub kind: Option<ControlKind>,
    pub config_sha256: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Wall-clock seconds per pipeline stage, in execution order.
    pub stages: Vec<(String, f64)>,
    pub summary: BTreeMap<String, Value>,
    pub files: Vec<String>,
    pub status: String,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Config(format!("invalid manifest: {e}")))
    }

    /// True when the manifest was produced from exactly these config bytes.
    pub fn matches_config(&self, config_bytes: &[u8]) -> bool {
        self.config_sha256 == sha256_hex(config_bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
