//! Offline toy evaluators.
//!
//! All three read `params.txt` (one decimal integer) from the working-tree
//! root and write `result.json` (`score`, `detail`) into the rollout's
//! artifact directory.

use std::collections::BTreeMap;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::{
    ContextDocument, Direction, Evaluator, EvaluatorConfig, EvaluatorError, MeasurementRecord,
    Preference, RunContext, SelectionRule, AggregatedOutcome, DEFAULT_METRIC,
};
use crate::canonical::to_canonical_pretty;
use crate::experiment::ExperimentRecord;

pub const PARAMS_FILE: &str = "params.txt";
pub const RESULT_FILE: &str = "result.json";

const URGENCY_NOTE: &str = "budget nearly exhausted";

/// Parse `params.txt` content: optional leading minus, decimal digits, one
/// optional trailing newline.
pub(crate) fn parse_param(raw: &str) -> Result<i64, String> {
    let body = raw
        .strip_suffix("\r\n")
        .or_else(|| raw.strip_suffix('\n'))
        .unwrap_or(raw);
    let digits = body.strip_prefix('-').unwrap_or(body);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("expected a single decimal integer, found {body:?}"));
    }
    body.parse::<i64>().map_err(|e| format!("{body:?}: {e}"))
}

fn read_param(ctx: &RunContext<'_>) -> Result<i64, MeasurementRecord> {
    let path = ctx.worktree.join(PARAMS_FILE);
    let raw = match fs::read_to_string(&path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(MeasurementRecord::contract_violation(format!(
                "missing required file {PARAMS_FILE}"
            )))
        }
        Err(e) => return Err(MeasurementRecord::error(format!("cannot read {PARAMS_FILE}: {e}"))),
    };
    parse_param(&raw)
        .map_err(|e| MeasurementRecord::contract_violation(format!("malformed {PARAMS_FILE}: {e}")))
}

fn write_result(ctx: &RunContext<'_>, score: f64, detail: &str) -> Result<String, MeasurementRecord> {
    let body = to_canonical_pretty(&json!({ "score": score, "detail": detail }))
        .map_err(|e| MeasurementRecord::error(format!("cannot serialize result: {e}")))?;
    let path = ctx.artifact_dir.join(RESULT_FILE);
    fs::write(&path, body)
        .map_err(|e| MeasurementRecord::error(format!("cannot write {}: {e}", path.display())))?;
    Ok(RESULT_FILE.to_string())
}

/// Settings shared by the quadratic toys.
#[derive(Debug, Clone, PartialEq)]
struct QuadraticSettings {
    target: i64,
    metric: String,
    goal_threshold: Option<f64>,
    urgency_threshold: Option<f64>,
    feedback_on_success: bool,
}

impl QuadraticSettings {
    fn from_config(config: &EvaluatorConfig) -> Result<Self, EvaluatorError> {
        let urgency_threshold: Option<f64> = config.option("urgency_threshold")?;
        if let Some(t) = urgency_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(EvaluatorError::Config(format!("urgency_threshold {t} outside [0, 1]")));
            }
        }
        Ok(Self {
            target: config.option("target")?.unwrap_or(7),
            metric: config.option("metric")?.unwrap_or_else(|| DEFAULT_METRIC.to_string()),
            goal_threshold: config.option("goal_threshold")?,
            urgency_threshold,
            feedback_on_success: config.option("feedback_on_success")?.unwrap_or(false),
        })
    }

    fn context(&self, beta: f64) -> ContextDocument {
        let mut text = format!(
            "Choose an integer x and write it to {PARAMS_FILE} at the repository root. \
             The evaluator reports {metric} = -(x - t)^2 for a hidden integer t; maximize {metric}.",
            metric = self.metric
        );
        if let Some(t) = self.urgency_threshold {
            if beta >= t {
                text.push_str(&format!(
                    "\n\nNote: {URGENCY_NOTE} (progress >= {t}); prefer small, low-risk changes to the best artifact."
                ));
            }
        }
        let mut doc = ContextDocument::new(text);
        doc.constraints.insert("required_file".into(), PARAMS_FILE.into());
        doc.constraints.insert("format".into(), "single decimal integer".into());
        doc.constraints.insert("metric".into(), self.metric.clone());
        doc
    }

    fn goal_reached(&self, outcome: &AggregatedOutcome) -> bool {
        match (self.goal_threshold, outcome.utility_estimate) {
            (Some(threshold), Some(u)) => outcome.is_feasible() && u >= threshold,
            _ => false,
        }
    }

    fn success(&self, ctx: &RunContext<'_>, x: i64, score: f64) -> MeasurementRecord {
        let detail = format!("x={x}");
        let artifact = match write_result(ctx, score, &detail) {
            Ok(a) => a,
            Err(record) => return record,
        };
        let mut record = MeasurementRecord::success(BTreeMap::new()).with_metric(self.metric.clone(), score);
        record.artifacts.push(artifact);
        if self.feedback_on_success {
            record.feedback = format!("{detail} gave {} = {score}", self.metric);
        }
        record
    }
}

/// Deterministic `score = -(x - target)^2`, maximized. Target defaults to 7.
///
/// Options (via `EvaluatorConfig::extra`): `target`, `metric`,
/// `goal_threshold` (stop once a feasible score reaches it),
/// `urgency_threshold` (append a budget note to the context once
/// `beta >= threshold`), `feedback_on_success`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEvaluator {
    settings: QuadraticSettings,
}

impl QuadraticEvaluator {
    pub fn new(target: i64) -> Self {
        Self {
            settings: QuadraticSettings {
                target,
                metric: DEFAULT_METRIC.into(),
                goal_threshold: None,
                urgency_threshold: None,
                feedback_on_success: false,
            },
        }
    }

    pub fn from_config(config: &EvaluatorConfig) -> Result<Self, EvaluatorError> {
        Ok(Self { settings: QuadraticSettings::from_config(config)? })
    }

    pub fn with_goal_threshold(mut self, threshold: f64) -> Self {
        self.settings.goal_threshold = Some(threshold);
        self
    }

    pub fn with_urgency_threshold(mut self, threshold: f64) -> Self {
        self.settings.urgency_threshold = Some(threshold);
        self
    }

    pub fn with_feedback(mut self) -> Self {
        self.settings.feedback_on_success = true;
        self
    }

    pub fn score(&self, x: i64) -> f64 {
        let d = (x - self.settings.target) as f64;
        0.0 - d * d
    }
}

impl Evaluator for QuadraticEvaluator {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn selection_rule(&self) -> SelectionRule {
        SelectionRule::ScalarUtility { direction: Direction::Maximize, metric: self.settings.metric.clone() }
    }

    fn run(&self, ctx: &RunContext<'_>) -> MeasurementRecord {
        match read_param(ctx) {
            Ok(x) => self.settings.success(ctx, x, self.score(x)),
            Err(record) => record,
        }
    }

    fn problem_context(&self, beta: f64) -> ContextDocument {
        self.settings.context(beta)
    }

    fn should_stop(&self, beta: f64, history: &[ExperimentRecord]) -> bool {
        beta >= 1.0 || history.iter().any(|e| self.goal_reached(&e.aggregated))
    }

    fn goal_reached(&self, outcome: &AggregatedOutcome) -> bool {
        self.settings.goal_reached(outcome)
    }
}

/// The quadratic plus Gaussian noise: `score = -(x - target)^2 + N(0, sigma)`.
///
/// Noise is drawn from a ChaCha8 stream seeded with the rollout seed, so the
/// expected utility of `x` is exactly `-(x - target)^2` and a fixed seed
/// reproduces byte-identical metrics. Option `sigma` defaults to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyQuadraticEvaluator {
    settings: QuadraticSettings,
    sigma: f64,
}

impl NoisyQuadraticEvaluator {
    pub fn new(target: i64, sigma: f64) -> Self {
        Self { settings: QuadraticEvaluator::new(target).settings, sigma }
    }

    pub fn from_config(config: &EvaluatorConfig) -> Result<Self, EvaluatorError> {
        let sigma: f64 = config.option("sigma")?.unwrap_or(1.0);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(EvaluatorError::Config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { settings: QuadraticSettings::from_config(config)?, sigma })
    }

    /// Expected utility of `x`.
    pub fn expected_score(&self, x: i64) -> f64 {
        let d = (x - self.settings.target) as f64;
        0.0 - d * d
    }

    fn noise(&self, seed: u64) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sigma validated non-negative and finite
        Normal::new(0.0, self.sigma).map(|n| n.sample(&mut rng)).unwrap_or(0.0)
    }
}

impl Evaluator for NoisyQuadraticEvaluator {
    fn name(&self) -> &str {
        "noisy_quadratic"
    }

    fn selection_rule(&self) -> SelectionRule {
        SelectionRule::ScalarUtility { direction: Direction::Maximize, metric: self.settings.metric.clone() }
    }

    fn run(&self, ctx: &RunContext<'_>) -> MeasurementRecord {
        match read_param(ctx) {
            Ok(x) => {
                let score = self.expected_score(x) + self.noise(ctx.seed);
                self.settings.success(ctx, x, score)
            }
            Err(record) => record,
        }
    }

    fn problem_context(&self, beta: f64) -> ContextDocument {
        let mut doc = self.settings.context(beta);
        doc.text.push_str("\nMeasurements are noisy; scores are averaged over rollouts.");
        doc
    }

    fn should_stop(&self, beta: f64, history: &[ExperimentRecord]) -> bool {
        beta >= 1.0 || history.iter().any(|e| self.goal_reached(&e.aggregated))
    }

    fn goal_reached(&self, outcome: &AggregatedOutcome) -> bool {
        self.settings.goal_reached(outcome)
    }
}

/// Preference-mode toy: no scalar utility; the comparator prefers the record
/// whose `distance = |x - target|` is smaller and explains why in feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceToyEvaluator {
    target: i64,
}

impl PreferenceToyEvaluator {
    pub fn new(target: i64) -> Self {
        Self { target }
    }

    pub fn from_config(config: &EvaluatorConfig) -> Result<Self, EvaluatorError> {
        Ok(Self { target: config.option("target")?.unwrap_or(7) })
    }
}

impl Evaluator for PreferenceToyEvaluator {
    fn name(&self) -> &str {
        "preference_toy"
    }

    fn selection_rule(&self) -> SelectionRule {
        SelectionRule::Preference
    }

    fn run(&self, ctx: &RunContext<'_>) -> MeasurementRecord {
        let x = match read_param(ctx) {
            Ok(x) => x,
            Err(record) => return record,
        };
        let distance = (x - self.target).abs() as f64;
        let detail = format!("x={x} is {distance} away from the preferred value");
        let artifact = match write_result(ctx, -distance, &detail) {
            Ok(a) => a,
            Err(record) => return record,
        };
        let mut record = MeasurementRecord::success(BTreeMap::new())
            .with_metric("x", x as f64)
            .with_metric("distance", distance)
            .with_feedback(detail);
        record.artifacts.push(artifact);
        record
    }

    fn problem_context(&self, _beta: f64) -> ContextDocument {
        let mut doc = ContextDocument::new(format!(
            "Choose an integer x and write it to {PARAMS_FILE}. A judge compares candidates \
             pairwise and prefers values closer to a hidden integer."
        ));
        doc.constraints.insert("required_file".into(), PARAMS_FILE.into());
        doc
    }

    fn compare_records(&self, a: &MeasurementRecord, b: &MeasurementRecord) -> Preference {
        let da = a.metric("distance").unwrap_or(f64::INFINITY);
        let db = b.metric("distance").unwrap_or(f64::INFINITY);
        db.partial_cmp(&da).map(Preference::from_ordering).unwrap_or(Preference::Tie)
    }
}
