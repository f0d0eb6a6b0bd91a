//! Episodic memory and the iteration-level controller.
//!
//! Lessons are distilled from individual experiments: failures produce an
//! issue, successes with feedback produce an insight. The store is an
//! append-only log of canonical JSON lines that can be replayed to rebuild
//! it.

mod controller;

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::{from_json, to_canonical_line};
use crate::embedding::{cosine, Embedder, HashedBagOfWords};
use crate::experiment::ExperimentRecord;

pub use controller::{
    decide_action, pivot_retrieval, Controller, ControllerAction, ControllerConfig, ControllerState, DecisionPolicy,
    DefaultPolicy, StepInput, StepOutcome,
};

pub const TRIGGER_MAX_CHARS: usize = 200;
pub const DEFAULT_TOP_M: usize = 5;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("lesson log {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LessonKind {
    Issue,
    Insight,
}

impl LessonKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LessonKind::Issue => "issue",
            LessonKind::Insight => "insight",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: String,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicLesson {
    pub lesson_id: String,
    pub trigger: String,
    pub lesson: String,
    pub recommended_actions: Vec<String>,
    pub kind: LessonKind,
    pub provenance: Provenance,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    pub created_at: DateTime<Utc>,
}

impl EpisodicLesson {
    pub fn new(
        kind: LessonKind,
        trigger: &str,
        lesson: &str,
        recommended_actions: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self, MemoryError> {
        let trigger = bounded(&one_line(trigger), TRIGGER_MAX_CHARS);
        let lesson = lesson.trim().to_string();
        if trigger.is_empty() || lesson.is_empty() {
            return Err(MemoryError::Usage("lesson trigger and text must be nonempty".into()));
        }
        let mut hasher = Sha256::new();
        for part in [kind.as_str(), &provenance.run_id, &provenance.branch, &trigger, &lesson] {
            hasher.update(part.as_bytes());
            hasher.update([0u8]);
        }
        let lesson_id = hex::encode(&hasher.finalize()[..8]);
        Ok(Self {
            lesson_id,
            trigger,
            lesson,
            recommended_actions,
            kind,
            provenance,
            embedding: None,
            created_at: Utc::now(),
        })
    }

    pub fn search_text(&self) -> String {
        format!("{}\n{}", self.trigger, self.lesson)
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn bounded(text: &str, max: usize) -> String {
    text.chars().take(max).collect()
}

/// Failure excerpt of an infeasible experiment, if any.
pub fn failure_excerpt(experiment: &ExperimentRecord) -> Option<String> {
    let record = &experiment.aggregated.record;
    if record.is_feasible() {
        return None;
    }
    let text = one_line(&record.feedback);
    Some(if text.is_empty() { record.status.as_str().to_string() } else { text })
}

/// Turns experiments into lessons. The template implementation needs no
/// model; agent-backed extractors plug in here.
pub trait LessonExtractor: Send + Sync {
    fn extract_issue(&self, goal: &str, experiment: &ExperimentRecord, run_id: &str) -> Result<EpisodicLesson, MemoryError>;
    fn extract_insight(
        &self,
        goal: &str,
        feedback: &str,
        experiment: &ExperimentRecord,
        run_id: &str,
    ) -> Result<EpisodicLesson, MemoryError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateExtractor;

fn trigger_class(excerpt: &str) -> (&'static str, &'static str) {
    let lower = excerpt.to_lowercase();
    if lower.contains("missing") || lower.contains("not found") || lower.contains("no such file") {
        ("a required file or input is missing", "create every file the evaluator contract requires")
    } else if lower.contains("timeout") || lower.contains("timed out") {
        ("a rollout exceeds its time limit", "cut per-rollout runtime before adding features")
    } else if lower.contains("malformed") || lower.contains("parse") || lower.contains("invalid") {
        ("output does not match the expected format", "emit exactly the format the evaluator parses")
    } else if lower.contains("exit") || lower.contains("traceback") || lower.contains("error") {
        ("the program crashes", "reproduce the crash locally and fix the reported line")
    } else {
        ("the evaluator rejects the artifact", "re-read the evaluator feedback and address it directly")
    }
}

impl LessonExtractor for TemplateExtractor {
    fn extract_issue(&self, _goal: &str, experiment: &ExperimentRecord, run_id: &str) -> Result<EpisodicLesson, MemoryError> {
        let Some(excerpt) = failure_excerpt(experiment) else {
            return Err(MemoryError::Usage(format!("{} is feasible; issues need a failure", experiment.branch)));
        };
        let status = experiment.aggregated.record.status.as_str();
        let (class, action) = trigger_class(&excerpt);
        let trigger = format!("{status}: {excerpt}");
        let lesson = format!(
            "when {class}, apply the fix context observed on {}: '{}' failed after {} debug tries with '{}'",
            experiment.branch,
            bounded(&one_line(&experiment.spec.summary), 120),
            experiment.debug_tries,
            bounded(&excerpt, 160),
        );
        EpisodicLesson::new(
            LessonKind::Issue,
            &trigger,
            &lesson,
            vec![action.to_string()],
            Provenance { branch: experiment.branch.clone(), run_id: run_id.to_string() },
        )
    }

    fn extract_insight(
        &self,
        goal: &str,
        feedback: &str,
        experiment: &ExperimentRecord,
        run_id: &str,
    ) -> Result<EpisodicLesson, MemoryError> {
        let feedback = one_line(feedback);
        if feedback.is_empty() {
            return Err(MemoryError::Usage("insight extraction needs nonempty feedback".into()));
        }
        if !experiment.is_feasible() {
            return Err(MemoryError::Usage(format!("{} is infeasible; insights need a success", experiment.branch)));
        }
        let lesson = format!(
            "when working on '{}', keep what worked in '{}': {}",
            bounded(&one_line(goal), 120),
            bounded(&one_line(&experiment.spec.summary), 120),
            feedback
        );
        EpisodicLesson::new(
            LessonKind::Insight,
            &feedback,
            &lesson,
            vec![format!("reuse the approach from {}", experiment.branch)],
            Provenance { branch: experiment.branch.clone(), run_id: run_id.to_string() },
        )
    }
}

/// In-memory lessons backed by an optional append-only log.
pub struct EpisodicStore {
    path: Option<PathBuf>,
    lessons: Vec<EpisodicLesson>,
    embedder: Arc<dyn Embedder>,
    pub top_m: usize,
}

impl std::fmt::Debug for EpisodicStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpisodicStore")
            .field("path", &self.path)
            .field("lessons", &self.lessons.len())
            .field("top_m", &self.top_m)
            .finish()
    }
}

impl Default for EpisodicStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EpisodicStore {
    pub fn in_memory() -> Self {
        Self { path: None, lessons: Vec::new(), embedder: Arc::new(HashedBagOfWords::default()), top_m: DEFAULT_TOP_M }
    }

    /// Open (or create) a log file and replay it.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        let mut store = Self { path: Some(path.to_path_buf()), ..Self::in_memory() };
        match fs::read_to_string(path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let lesson: EpisodicLesson = from_json(line).map_err(|e| MemoryError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                    store.lessons.push(lesson);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(MemoryError::Io { path: path.to_path_buf(), source }),
        }
        Ok(store)
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lessons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lessons.is_empty()
    }

    pub fn lessons(&self) -> &[EpisodicLesson] {
        &self.lessons
    }

    /// Persist then keep. A write failure leaves the store unchanged.
    pub fn add(&mut self, mut lesson: EpisodicLesson) -> Result<(), MemoryError> {
        if lesson.embedding.is_none() {
            lesson.embedding = Some(self.embedder.embed(&lesson.search_text()));
        }
        if let Some(path) = &self.path {
            let io_err = |source| MemoryError::Io { path: path.clone(), source };
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
            let mut line = to_canonical_line(&lesson)?;
            line.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
            file.write_all(line.as_bytes()).map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        }
        self.lessons.push(lesson);
        Ok(())
    }

    /// Top-m lessons by cosine similarity to the goal, plus the failure
    /// excerpt when `experiment` is infeasible. Ties keep insertion order.
    pub fn retrieve(&self, goal: &str, experiment: Option<&ExperimentRecord>) -> Vec<EpisodicLesson> {
        if self.lessons.is_empty() || self.top_m == 0 {
            return Vec::new();
        }
        let mut query = goal.to_string();
        if let Some(excerpt) = experiment.and_then(failure_excerpt) {
            query.push('\n');
            query.push_str(&excerpt);
        }
        let q = self.embedder.embed(&query);
        let mut scored: Vec<(usize, f64)> = self
            .lessons
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let sim = match &l.embedding {
                    Some(v) => cosine(&q, v),
                    None => cosine(&q, &self.embedder.embed(&l.search_text())),
                };
                (i, sim)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(self.top_m).map(|(i, _)| self.lessons[i].clone()).collect()
    }
}

/// Add 1 issue for a failure, 1 insight for a success with feedback, and
/// nothing otherwise. Returns the new lessons.
pub fn update_episodic(
    store: &mut EpisodicStore,
    goal: &str,
    experiment: &ExperimentRecord,
    run_id: &str,
    extractor: &dyn LessonExtractor,
) -> Result<Vec<EpisodicLesson>, MemoryError> {
    let lesson = if !experiment.is_feasible() {
        extractor.extract_issue(goal, experiment, run_id)?
    } else {
        let feedback = experiment.aggregated.record.feedback.trim();
        if feedback.is_empty() {
            return Ok(Vec::new());
        }
        extractor.extract_insight(goal, feedback, experiment, run_id)?
    };
    store.add(lesson.clone())?;
    Ok(vec![store.lessons.last().cloned().unwrap_or(lesson)])
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::evaluator::{AggregatedOutcome, MeasurementRecord};
    use crate::search::{SolutionSpec, SpecOrigin};

    pub(crate) fn experiment(branch: &str, record: MeasurementRecord) -> ExperimentRecord {
        let now = Utc::now();
        ExperimentRecord {
            branch: branch.into(),
            parent_branch: "kapso/t/root".into(),
            spec: SolutionSpec {
                spec_id: format!("spec-{branch}"),
                summary: "try something".into(),
                instructions: String::new(),
                parent_branch: "kapso/t/root".into(),
                origin: SpecOrigin::Linear,
            },
            beta: 0.0,
            rollouts: 1,
            aggregated: AggregatedOutcome {
                utility_estimate: None,
                rollout_count: 1,
                rollout_records: vec![record.clone()],
                record,
            },
            utility_estimate: None,
            debug_tries: 0,
            cost: 0.0,
            commit: None,
            published: true,
            started_at: now,
            finished_at: now,
        }
    }

    #[test]
    fn issue_from_contract_violation_mentions_file() {
        let e = experiment("b1", MeasurementRecord::contract_violation("missing required file params.txt"));
        let lesson = TemplateExtractor.extract_issue("g", &e, "r").unwrap();
        assert_eq!(lesson.kind, LessonKind::Issue);
        assert!(lesson.trigger.contains("params.txt"));
        assert_eq!(lesson.provenance.branch, "b1");
        assert!(lesson.trigger.chars().count() <= TRIGGER_MAX_CHARS);
    }

    #[test]
    fn distinct_failures_distinct_ids() {
        let a = experiment("b1", MeasurementRecord::error("boom"));
        let b = experiment("b2", MeasurementRecord::error("bang"));
        let la = TemplateExtractor.extract_issue("g", &a, "r").unwrap();
        let lb = TemplateExtractor.extract_issue("g", &b, "r").unwrap();
        assert_ne!(la.lesson_id, lb.lesson_id);
    }

    #[test]
    fn issue_on_success_is_usage_error() {
        let e = experiment("b", MeasurementRecord::success(Default::default()));
        assert!(matches!(TemplateExtractor.extract_issue("g", &e, "r"), Err(MemoryError::Usage(_))));
    }

    #[test]
    fn insight_keeps_feedback() {
        let e = experiment("b", MeasurementRecord::success(Default::default()));
        let lesson = TemplateExtractor.extract_insight("g", "normalization improved score", &e, "r").unwrap();
        assert_eq!(lesson.kind, LessonKind::Insight);
        assert!(lesson.lesson.contains("normalization"));
        assert!(TemplateExtractor.extract_insight("g", "  ", &e, "r").is_err());
    }

    #[test]
    fn update_follows_branch_rules() {
        let mut store = EpisodicStore::in_memory();
        let fail = experiment("b1", MeasurementRecord::error("boom"));
        let quiet = experiment("b2", MeasurementRecord::success(Default::default()));
        let chatty = experiment("b3", MeasurementRecord::success(Default::default()).with_feedback("scaling helped"));
        let d1 = update_episodic(&mut store, "g", &fail, "r", &TemplateExtractor).unwrap();
        assert_eq!((d1.len(), d1[0].kind), (1, LessonKind::Issue));
        assert!(update_episodic(&mut store, "g", &quiet, "r", &TemplateExtractor).unwrap().is_empty());
        let d3 = update_episodic(&mut store, "g", &chatty, "r", &TemplateExtractor).unwrap();
        assert_eq!((d3.len(), d3[0].kind), (1, LessonKind::Insight));
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodic/lessons.jsonl");
        let mut store = EpisodicStore::open(&path).unwrap();
        update_episodic(&mut store, "g", &experiment("b1", MeasurementRecord::error("boom")), "r", &TemplateExtractor)
            .unwrap();
        update_episodic(&mut store, "g", &experiment("b2", MeasurementRecord::error("bang")), "r", &TemplateExtractor)
            .unwrap();
        let replayed = EpisodicStore::open(&path).unwrap();
        assert_eq!(replayed.lessons(), store.lessons());
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn persistence_failure_leaves_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("sub");
        let mut store = EpisodicStore::open(&blocker.join("lessons.jsonl")).unwrap();
        fs::write(&blocker, "x").unwrap();
        let e = experiment("b1", MeasurementRecord::error("boom"));
        assert!(update_episodic(&mut store, "g", &e, "r", &TemplateExtractor).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn retrieval_ranks_matching_trigger_first_and_respects_m() {
        let mut store = EpisodicStore::in_memory();
        assert!(store.retrieve("g", None).is_empty());
        for (b, msg) in [("b1", "tokenizer vocabulary overflow"), ("b2", "missing required file params.txt")] {
            update_episodic(&mut store, "g", &experiment(b, MeasurementRecord::contract_violation(msg)), "r", &TemplateExtractor)
                .unwrap();
        }
        let current = experiment("b3", MeasurementRecord::contract_violation("missing required file params.txt"));
        let top = store.retrieve("g", Some(&current));
        assert_eq!(top[0].provenance.branch, "b2");
        store.top_m = 1;
        assert_eq!(store.retrieve("g", Some(&current)).len(), 1);
    }
}
