//! The on-branch experiment bundle.
//!
//! Layout, relative to the session worktree:
//!
//! ```text
//! .kapso/experiment.json          manifest (canonical JSON)
//! .kapso/records/rollout-<k>.json one measurement record per rollout
//! .kapso/logs/<name>.log          agent transcripts, evaluator feedback
//! .kapso/artifacts/...            evaluator-produced files
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical::ext_real;
use crate::evaluator::{EvaluatorConfig, MeasurementRecord, Status};
use crate::search::SolutionSpec;

pub const BUNDLE_DIR: &str = ".kapso";
pub const MANIFEST_PATH: &str = ".kapso/experiment.json";
pub const RECORDS_DIR: &str = ".kapso/records";
pub const LOGS_DIR: &str = ".kapso/logs";
pub const ARTIFACTS_DIR: &str = ".kapso/artifacts";
pub const KEEP_FILE: &str = ".kapso/.keep";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// What an experiment hands to `commit_run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactBundle {
    pub spec: SolutionSpec,
    pub parent_branch: String,
    pub evaluator: String,
    pub evaluator_config: EvaluatorConfig,
    #[serde(with = "ext_real")]
    pub beta: f64,
    pub rollout_records: Vec<MeasurementRecord>,
    pub aggregated: MeasurementRecord,
    #[serde(with = "ext_real::option", default)]
    pub utility_estimate: Option<f64>,
    pub debug_tries: u32,
    /// Log name → UTF-8 text. Names become `.kapso/logs/<name>.log`.
    pub logs: BTreeMap<String, String>,
}

impl ArtifactBundle {
    pub fn validate(&self) -> Result<(), String> {
        if self.rollout_records.len() != self.evaluator_config.rollouts as usize {
            return Err(format!(
                "bundle has {} rollout records but K = {}",
                self.rollout_records.len(),
                self.evaluator_config.rollouts
            ));
        }
        if self.spec.spec_id.is_empty() {
            return Err("bundle spec_id is empty".into());
        }
        for name in self.logs.keys() {
            if !is_simple_name(name) {
                return Err(format!("log name {name:?} must be a plain file name"));
            }
        }
        Ok(())
    }

    pub(crate) fn log_file_name(name: &str) -> String {
        if name.ends_with(".log") {
            name.to_string()
        } else {
            format!("{name}.log")
        }
    }
}

fn is_simple_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub parent_commit: String,
    /// Code paths changed relative to the parent, excluding the bundle.
    pub changed_paths: Vec<String>,
}

/// Serialized form of `.kapso/experiment.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub spec_id: String,
    pub spec: SolutionSpec,
    pub branch: String,
    pub parent_branch: String,
    pub evaluator: String,
    pub evaluator_config: EvaluatorConfig,
    pub rollouts: u32,
    #[serde(with = "ext_real")]
    pub beta: f64,
    pub status: Status,
    #[serde(with = "ext_real::option", default)]
    pub utility_estimate: Option<f64>,
    pub debug_tries: u32,
    pub record_files: Vec<String>,
    pub log_files: Vec<String>,
    pub artifact_files: Vec<String>,
    pub diff_summary: DiffSummary,
}
