//! The evaluator contract.
//!
//! An [`Evaluator`] decides how an artifact is executed and measured, how
//! measurements are compared (scalar utility or preference), how stochastic
//! rollouts are aggregated, and when a run should stop. [`evaluate`] is the
//! harness every caller goes through: it runs the configured number of
//! rollouts in a fresh artifact directory and aggregates them.

mod budget;
mod command;
mod record;
mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::agent::ContextDocument;
use crate::experiment::ExperimentRecord;

pub use budget::{budget_progress, BudgetSpec, Consumed};
pub use command::CommandEvaluator;
pub use record::{
    aggregate_records, aggregate_utilities, is_contained_relative, prefer, utility,
    AggregatedOutcome, Direction, MeasurementRecord, Preference, SelectionRule, Status,
    DEFAULT_METRIC,
};
pub use toy::{NoisyQuadraticEvaluator, PreferenceToyEvaluator, QuadraticEvaluator, PARAMS_FILE, RESULT_FILE};

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("evaluator contract error: designated metric `{0}` missing from a success record")]
    MissingMetric(String),
    #[error("invalid evaluator configuration: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl EvaluatorError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        EvaluatorError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every rollout uses `base_seed`.
    #[default]
    FixedBaseSeed,
    /// Rollout `k` uses `base_seed + k`.
    SequentialFromBase,
}

/// Evaluator configuration: rollout count, seeding, timeout, and opaque
/// evaluator-specific options. Immutable once a run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub rollouts: u32,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default)]
    pub base_seed: u64,
    pub timeout_ms: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            rollouts: 1,
            seed_policy: SeedPolicy::FixedBaseSeed,
            base_seed: 0,
            timeout_ms: 60_000,
            extra: BTreeMap::new(),
        }
    }
}

impl EvaluatorConfig {
    pub fn with_rollouts(mut self, k: u32) -> Self {
        self.rollouts = k;
        self
    }

    pub fn with_option(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.extra.insert(key.into(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), EvaluatorError> {
        if self.rollouts == 0 {
            return Err(EvaluatorError::Config("rollouts (K) must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(EvaluatorError::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn rollout_seed(&self, rollout_index: u32) -> u64 {
        match self.seed_policy {
            SeedPolicy::FixedBaseSeed => self.base_seed,
            SeedPolicy::SequentialFromBase => self.base_seed.wrapping_add(u64::from(rollout_index)),
        }
    }

    /// Parse an option from `extra`; absent keys yield `Ok(None)`.
    pub fn option<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, EvaluatorError>
    where
        T::Err: std::fmt::Display,
    {
        match self.extra.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .trim()
                .parse::<T>()
                .map(Some)
                .map_err(|e| EvaluatorError::Config(format!("option `{key}` = {raw:?}: {e}"))),
        }
    }
}

/// Everything one rollout sees.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub worktree: &'a Path,
    /// Private output directory for this rollout.
    pub artifact_dir: &'a Path,
    pub config: &'a EvaluatorConfig,
    pub rollout_index: u32,
    pub seed: u64,
}

/// A task's evaluator contract.
///
/// Implementations must be safe to call from several sessions at once; each
/// call gets its own working tree and artifact directory.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;

    fn selection_rule(&self) -> SelectionRule;

    /// Execute one rollout. Failures are reported in the record, not as `Err`.
    fn run(&self, ctx: &RunContext<'_>) -> MeasurementRecord;

    /// Context shown to the system at budget progress `beta`. Must be a pure
    /// function of `beta`.
    fn problem_context(&self, beta: f64) -> ContextDocument;

    fn should_stop(&self, beta: f64, history: &[ExperimentRecord]) -> bool {
        let _ = history;
        beta >= 1.0
    }

    /// Whether an outcome satisfies a declared goal threshold.
    fn goal_reached(&self, outcome: &AggregatedOutcome) -> bool {
        let _ = outcome;
        false
    }

    /// Preference-mode comparator. Only consulted when
    /// [`selection_rule`](Evaluator::selection_rule) is `Preference`.
    fn compare_records(&self, a: &MeasurementRecord, b: &MeasurementRecord) -> Preference {
        let _ = (a, b);
        Preference::Tie
    }

    fn aggregate_records(&self, records: &[MeasurementRecord]) -> Result<MeasurementRecord, EvaluatorError> {
        aggregate_records(records)
    }

    fn aggregate_utilities(&self, utilities: &[f64]) -> Result<f64, EvaluatorError> {
        aggregate_utilities(utilities)
    }

    /// File a scaffold should create as an empty entrypoint stub, if any.
    fn entrypoint(&self) -> Option<&str> {
        None
    }

    fn prefer(&self, a: &AggregatedOutcome, b: &AggregatedOutcome) -> Preference {
        prefer(a, b, &self.selection_rule(), &|x, y| self.compare_records(x, y))
    }
}

/// Run rollout `rollout_index` of an artifact.
///
/// The rollout writes into `<artifact_root>/rollout-<k>/`; artifact paths in
/// the returned record are rewritten relative to `artifact_root`. A record
/// that names a path outside its directory becomes a contract violation.
pub fn run_artifact(
    evaluator: &dyn Evaluator,
    worktree: &Path,
    artifact_root: &Path,
    config: &EvaluatorConfig,
    rollout_index: u32,
) -> Result<MeasurementRecord, EvaluatorError> {
    config.validate()?;
    if rollout_index >= config.rollouts {
        return Err(EvaluatorError::Usage(format!(
            "rollout index {rollout_index} out of range for K = {}",
            config.rollouts
        )));
    }
    let subdir = format!("rollout-{rollout_index}");
    let rollout_dir = artifact_root.join(&subdir);
    if rollout_dir.exists() {
        fs::remove_dir_all(&rollout_dir).map_err(|e| EvaluatorError::io(&rollout_dir, e))?;
    }
    fs::create_dir_all(&rollout_dir).map_err(|e| EvaluatorError::io(&rollout_dir, e))?;

    let ctx = RunContext {
        worktree,
        artifact_dir: &rollout_dir,
        config,
        rollout_index,
        seed: config.rollout_seed(rollout_index),
    };
    let mut record = evaluator.run(&ctx);
    record.rollout_index = rollout_index;

    if let Some(bad) = record.artifacts.iter().find(|a| !is_contained_relative(a)) {
        return Ok(MeasurementRecord::contract_violation(format!(
            "artifact path {bad:?} escapes the artifact directory"
        ))
        .with_rollout(rollout_index));
    }
    record.artifacts = record
        .artifacts
        .iter()
        .map(|a| format!("{subdir}/{}", a.trim_start_matches("./")))
        .collect();
    if record.status == Status::Error && record.feedback.trim().is_empty() {
        record.feedback = "error without diagnostic".into();
    }
    Ok(record)
}

impl MeasurementRecord {
    fn with_rollout(mut self, k: u32) -> Self {
        self.rollout_index = k;
        self
    }
}

/// Run all K rollouts into a cleared `artifact_root` and aggregate them.
///
/// In scalar mode the utility estimate is the evaluator's aggregation of
/// per-rollout utilities. A success record lacking the designated metric is
/// an evaluator bug and is returned as `Err`.
pub fn evaluate(
    evaluator: &dyn Evaluator,
    worktree: &Path,
    artifact_root: &Path,
    config: &EvaluatorConfig,
) -> Result<AggregatedOutcome, EvaluatorError> {
    config.validate()?;
    if artifact_root.exists() {
        fs::remove_dir_all(artifact_root).map_err(|e| EvaluatorError::io(artifact_root, e))?;
    }
    fs::create_dir_all(artifact_root).map_err(|e| EvaluatorError::io(artifact_root, e))?;

    let records = (0..config.rollouts)
        .map(|k| run_artifact(evaluator, worktree, artifact_root, config, k))
        .collect::<Result<Vec<_>, _>>()?;
    outcome_from_rollouts(evaluator, records)
}

/// Aggregate already-collected rollout records into an outcome.
pub fn outcome_from_rollouts(
    evaluator: &dyn Evaluator,
    records: Vec<MeasurementRecord>,
) -> Result<AggregatedOutcome, EvaluatorError> {
    let record = evaluator.aggregate_records(&records)?;
    let rule = evaluator.selection_rule();
    let utility_estimate = if rule.is_scalar() {
        let utilities = records
            .iter()
            .map(|r| utility(r, &rule))
            .collect::<Result<Vec<_>, _>>()?;
        Some(evaluator.aggregate_utilities(&utilities)?)
    } else {
        None
    };
    Ok(AggregatedOutcome {
        record,
        utility_estimate,
        rollout_count: records.len() as u32,
        rollout_records: records,
    })
}

/// Build a built-in evaluator by registry name.
pub fn builtin(name: &str, config: &EvaluatorConfig) -> Result<Option<Box<dyn Evaluator>>, EvaluatorError> {
    Ok(Some(match name {
        "quadratic" => Box::new(QuadraticEvaluator::from_config(config)?),
        "noisy_quadratic" => Box::new(NoisyQuadraticEvaluator::from_config(config)?),
        "preference_toy" => Box::new(PreferenceToyEvaluator::from_config(config)?),
        "command" => Box::new(CommandEvaluator::from_config(config)?),
        _ => return Ok(None),
    }))
}

pub const BUILTIN_EVALUATORS: &[&str] = &["quadratic", "noisy_quadratic", "preference_toy", "command"];
