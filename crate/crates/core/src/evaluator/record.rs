//! Measurement records, selection rules, and stochastic aggregation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::EvaluatorError;
use crate::canonical::ext_real;

/// Metric consulted by scalar selection when the evaluator does not name one.
pub const DEFAULT_METRIC: &str = "score";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Error,
    ContractViolation,
}

impl Status {
    /// Higher is worse: error > contract_violation > success.
    pub fn severity(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::ContractViolation => 1,
            Status::Error => 2,
        }
    }

    pub fn is_feasible(self) -> bool {
        self == Status::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Error => "error",
            Status::ContractViolation => "contract_violation",
        }
    }
}

/// One evaluator execution: status, metrics, qualitative feedback, artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub status: Status,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub feedback: String,
    /// Paths relative to the session's artifact directory.
    #[serde(default)]
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub rollout_index: u32,
}

impl MeasurementRecord {
    pub fn success(metrics: BTreeMap<String, f64>) -> Self {
        Self {
            status: Status::Success,
            metrics,
            feedback: String::new(),
            artifacts: Vec::new(),
            rollout_index: 0,
        }
    }

    /// An error record. Errors always carry a diagnostic, so an empty
    /// `feedback` is replaced with a generic one.
    pub fn error(feedback: impl Into<String>) -> Self {
        Self::failure(Status::Error, feedback.into())
    }

    pub fn contract_violation(feedback: impl Into<String>) -> Self {
        Self::failure(Status::ContractViolation, feedback.into())
    }

    fn failure(status: Status, feedback: String) -> Self {
        let feedback = if feedback.trim().is_empty() {
            format!("{} without diagnostic", status.as_str())
        } else {
            feedback
        };
        Self {
            status,
            metrics: BTreeMap::new(),
            feedback,
            artifacts: Vec::new(),
            rollout_index: 0,
        }
    }

    pub fn with_metric(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn with_feedback(mut self, feedback: impl Into<String>) -> Self {
        self.feedback = feedback.into();
        self
    }

    pub fn is_feasible(&self) -> bool {
        self.status.is_feasible()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// True when `relative` is a plain relative path that cannot leave its base
/// directory (no root, prefix, or `..` components).
pub fn is_contained_relative(relative: &str) -> bool {
    let path = Path::new(relative);
    !relative.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Either a scalar utility over a designated metric or a preference relation
/// supplied by the evaluator. Exactly one mode is active per evaluator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionRule {
    ScalarUtility {
        direction: Direction,
        #[serde(default = "default_metric")]
        metric: String,
    },
    Preference,
}

fn default_metric() -> String {
    DEFAULT_METRIC.to_string()
}

impl SelectionRule {
    pub fn maximize(metric: impl Into<String>) -> Self {
        SelectionRule::ScalarUtility { direction: Direction::Maximize, metric: metric.into() }
    }

    pub fn minimize(metric: impl Into<String>) -> Self {
        SelectionRule::ScalarUtility { direction: Direction::Minimize, metric: metric.into() }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, SelectionRule::ScalarUtility { .. })
    }

    /// The metric whose value summarizes a record, if the rule names one.
    pub fn headline_metric(&self) -> Option<&str> {
        match self {
            SelectionRule::ScalarUtility { metric, .. } => Some(metric),
            SelectionRule::Preference => None,
        }
    }
}

/// Aggregate of K rollouts: the aggregated record and, in scalar mode, the
/// aggregated utility estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedOutcome {
    pub record: MeasurementRecord,
    #[serde(with = "ext_real::option", default)]
    pub utility_estimate: Option<f64>,
    pub rollout_count: u32,
    pub rollout_records: Vec<MeasurementRecord>,
}

impl AggregatedOutcome {
    pub fn is_feasible(&self) -> bool {
        self.record.is_feasible()
    }

    /// Comparable scalar for this outcome; the sentinel when infeasible or
    /// when no estimate is available.
    pub fn comparable_utility(&self, rule: &SelectionRule) -> f64 {
        if !self.is_feasible() {
            return f64::NEG_INFINITY;
        }
        match self.utility_estimate {
            Some(u) => u,
            None => utility(&self.record, rule).unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Default record aggregation.
///
/// Status is the worst present; each metric is the mean over rollouts that
/// report it; feedback is concatenated with rollout labels; artifacts are the
/// ordered union. A single record is returned unchanged.
pub fn aggregate_records(records: &[MeasurementRecord]) -> Result<MeasurementRecord, EvaluatorError> {
    let first = records
        .first()
        .ok_or_else(|| EvaluatorError::Usage("cannot aggregate an empty list of records".into()))?;
    if records.len() == 1 {
        return Ok(first.clone());
    }

    let status = records
        .iter()
        .map(|r| r.status)
        .max_by_key(|s| s.severity())
        .unwrap_or(Status::Success);

    let mut sums: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for r in records {
        for (name, value) in &r.metrics {
            let entry = sums.entry(name.clone()).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
    }
    let metrics = sums
        .into_iter()
        .map(|(name, (sum, n))| (name, sum / f64::from(n)))
        .collect();

    let feedback = records
        .iter()
        .filter(|r| !r.feedback.trim().is_empty())
        .map(|r| format!("[rollout {}] {}", r.rollout_index, r.feedback.trim_end()))
        .collect::<Vec<_>>()
        .join("\n");

    let mut artifacts: Vec<String> = Vec::new();
    for r in records {
        for a in &r.artifacts {
            if !artifacts.contains(a) {
                artifacts.push(a.clone());
            }
        }
    }

    let mut out = MeasurementRecord {
        status,
        metrics,
        feedback,
        artifacts,
        rollout_index: 0,
    };
    if out.status == Status::Error && out.feedback.is_empty() {
        out.feedback = "error without diagnostic".into();
    }
    Ok(out)
}

/// Default utility aggregation: the sample mean, except that any sentinel
/// (`-inf` in the internal greater-is-better scale, or NaN) absorbs.
pub fn aggregate_utilities(utilities: &[f64]) -> Result<f64, EvaluatorError> {
    if utilities.is_empty() {
        return Err(EvaluatorError::Usage("cannot aggregate an empty list of utilities".into()));
    }
    if utilities.iter().any(|u| u.is_nan() || *u == f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    if utilities.len() == 1 {
        return Ok(utilities[0]);
    }
    Ok(utilities.iter().sum::<f64>() / utilities.len() as f64)
}

/// Scalar utility of one record on a greater-is-better scale.
///
/// Infeasible records map to `-inf`. Minimized metrics are negated so that
/// every downstream comparison can assume larger is better.
pub fn utility(record: &MeasurementRecord, rule: &SelectionRule) -> Result<f64, EvaluatorError> {
    let (direction, metric) = match rule {
        SelectionRule::ScalarUtility { direction, metric } => (*direction, metric.as_str()),
        SelectionRule::Preference => {
            return Err(EvaluatorError::Usage(
                "utility is undefined under a preference selection rule".into(),
            ))
        }
    };
    if !record.is_feasible() {
        return Ok(f64::NEG_INFINITY);
    }
    let value = record
        .metric(metric)
        .ok_or_else(|| EvaluatorError::MissingMetric(metric.to_string()))?;
    Ok(match direction {
        Direction::Maximize => value,
        Direction::Minimize => -value,
    })
}

/// Outcome of comparing two aggregated records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    ABetter,
    BBetter,
    Tie,
}

impl Preference {
    pub fn from_ordering(ord: Ordering) -> Self {
        match ord {
            Ordering::Greater => Preference::ABetter,
            Ordering::Less => Preference::BBetter,
            Ordering::Equal => Preference::Tie,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Preference::ABetter => Preference::BBetter,
            Preference::BBetter => Preference::ABetter,
            Preference::Tie => Preference::Tie,
        }
    }
}

/// Compare two aggregated outcomes.
///
/// A feasible record always beats an infeasible one, whatever the mode or the
/// comparator says. Scalar mode then compares utilities; preference mode asks
/// `comparator`. Index tie-breaking is the caller's job.
pub fn prefer(
    a: &AggregatedOutcome,
    b: &AggregatedOutcome,
    rule: &SelectionRule,
    comparator: &dyn Fn(&MeasurementRecord, &MeasurementRecord) -> Preference,
) -> Preference {
    match (a.is_feasible(), b.is_feasible()) {
        (true, false) => return Preference::ABetter,
        (false, true) => return Preference::BBetter,
        _ => {}
    }
    match rule {
        SelectionRule::ScalarUtility { .. } => {
            if !a.is_feasible() {
                return Preference::Tie;
            }
            let ua = a.comparable_utility(rule);
            let ub = b.comparable_utility(rule);
            ua.partial_cmp(&ub).map(Preference::from_ordering).unwrap_or(Preference::Tie)
        }
        SelectionRule::Preference => comparator(&a.record, &b.record),
    }
}
