//! Run reports: deterministic JSON artifacts describing what a task did.
//!
//! Everything in a report except the `timestamp` field is a pure function
//! of (config, seed); the determinism test re-runs configs and compares the
//! serialized reports with the timestamp stripped.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    /// All requested checks passed.
    Passed,
    /// The tool worked and found violations (a refuted estimate, a failed
    /// certificate, a blow-up) — a valid scientific outcome, distinct from
    /// failure.
    ViolationsFound,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    /// SHA-256 of the canonical serialization of the effective config
    /// (after command-line overrides).
    pub config_hash: String,
    pub system: String,
    pub task_type: String,
    pub outcome: TaskOutcome,
    pub verdicts: serde_json::Value,
    pub warnings: Vec<String>,
    /// The one nondeterministic field; excluded from comparisons.
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timestamp {
    pub unix_ms: u128,
    pub wall_ms: u128,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    format!("sha256:{:x}", hasher.finalize())
}

impl RunReport {
    pub fn new(
        cfg: &RunConfig,
        system: String,
        outcome: TaskOutcome,
        verdicts: serde_json::Value,
        warnings: Vec<String>,
        wall_ms: u128,
    ) -> RunReport {
        let unix_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        RunReport {
            schema_version: crate::config::SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash(cfg),
            system,
            task_type: cfg.task.kind().to_string(),
            outcome,
            verdicts,
            warnings,
            timestamp: Timestamp { unix_ms, wall_ms },
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
