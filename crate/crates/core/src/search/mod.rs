//! Search over solution specifications.
//!
//! Every strategy funnels its experiments through [`implement_and_debug`]:
//! open a session, let the agent implement the spec, evaluate, and while the
//! outcome is infeasible let the agent repair it (up to `D` tries). The
//! session is committed and published whatever the final status.

mod proposer;
mod strategy;
mod tree;

use std::collections::BTreeMap;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{CodingAgent, ContextDocument, EditRequest, EditResult};
use crate::evaluator::{
    outcome_from_rollouts, AggregatedOutcome, Evaluator, EvaluatorConfig, MeasurementRecord, Preference,
};
use crate::experiment::{ArtifactBundle, ExperimentError, ExperimentRecord, Workspace};

pub use proposer::{
    EnsembleProposer, FnProposer, HttpProposer, PayloadSequenceProposer, ProposalRequest, ProposedSpec, Proposer,
};
pub use strategy::{linear_next, IterationInput, LinearStrategy, SearchStrategy, TreeConfig, TreeStrategy};
pub use tree::{
    tree_expand, tree_prune, tree_select, MarginPruner, NodeStatus, Pruner, RecencySelector, SearchNode, SearchTree,
    Selector, TreeSnapshotRow,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("proposer failed: {0}")]
    Proposer(String),
    #[error("experiment on {branch} failed: {source}")]
    Experiment { branch: String, source: ExperimentError },
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecOrigin {
    Linear,
    TreeExpand,
    DebugRevision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionSpec {
    pub spec_id: String,
    pub summary: String,
    /// Consumed by the coding agent.
    pub instructions: String,
    pub parent_branch: String,
    pub origin: SpecOrigin,
}

/// Maximum number of debug tries per experiment. At least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct DebugBudget(u32);

impl DebugBudget {
    pub fn new(d: u32) -> Result<Self, SearchError> {
        if d == 0 {
            return Err(SearchError::Usage("debug budget D must be at least 1".into()));
        }
        Ok(Self(d))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl Default for DebugBudget {
    fn default() -> Self {
        Self(3)
    }
}

impl TryFrom<u32> for DebugBudget {
    type Error = String;
    fn try_from(d: u32) -> Result<Self, String> {
        Self::new(d).map_err(|e| e.to_string())
    }
}

impl From<DebugBudget> for u32 {
    fn from(d: DebugBudget) -> u32 {
        d.0
    }
}

/// What one experiment needs besides its spec.
#[derive(Clone, Copy)]
pub struct ExperimentDeps<'a> {
    pub workspace: &'a Workspace,
    pub evaluator: &'a dyn Evaluator,
    pub evaluator_name: &'a str,
    pub evaluator_config: &'a EvaluatorConfig,
    pub agent: &'a dyn CodingAgent,
    pub debug_budget: DebugBudget,
}

fn failed_outcome(evaluator: &dyn Evaluator, config: &EvaluatorConfig, feedback: &str) -> AggregatedOutcome {
    let records: Vec<MeasurementRecord> = (0..config.rollouts)
        .map(|k| {
            let mut r = MeasurementRecord::error(feedback);
            r.rollout_index = k;
            r
        })
        .collect();
    outcome_from_rollouts(evaluator, records).unwrap_or_else(|_| {
        let record = MeasurementRecord::error(feedback);
        AggregatedOutcome {
            utility_estimate: evaluator.selection_rule().is_scalar().then_some(f64::NEG_INFINITY),
            rollout_count: 1,
            rollout_records: vec![record.clone()],
            record,
        }
    })
}

fn measure(deps: &ExperimentDeps<'_>, worktree: &std::path::Path, artifacts: &std::path::Path) -> AggregatedOutcome {
    match crate::evaluator::evaluate(deps.evaluator, worktree, artifacts, deps.evaluator_config) {
        Ok(outcome) => outcome,
        Err(e) => failed_outcome(deps.evaluator, deps.evaluator_config, &format!("evaluator failure: {e}")),
    }
}

fn log_edit(logs: &mut BTreeMap<String, String>, name: &str, result: &EditResult) {
    let mut text = result.transcript.clone();
    if let Some(d) = &result.diagnostic {
        text.push_str(&format!("diagnostic: {d}\n"));
    }
    text.push_str(&format!("changed: {}\n", result.changed_paths.join(", ")));
    logs.insert(name.to_string(), text);
}

/// Run one experiment on `branch`, branching from `spec.parent_branch`.
pub fn implement_and_debug(
    spec: &SolutionSpec,
    context: &ContextDocument,
    branch: &str,
    beta: f64,
    deps: &ExperimentDeps<'_>,
) -> Result<ExperimentRecord, SearchError> {
    let started_at = Utc::now();
    let lifecycle = |source| SearchError::Experiment { branch: branch.to_string(), source };
    let ws = deps.workspace;
    let mut session = ws.open_session(&spec.parent_branch, branch).map_err(lifecycle)?;
    let worktree = session.worktree().to_path_buf();
    let artifacts = session.artifact_dir();
    let mut logs = BTreeMap::new();
    let mut cost = 0.0;

    let implemented = deps.agent.apply_edits(&EditRequest::implement(spec.clone(), context.clone(), worktree.clone()));
    cost += implemented.cost;
    log_edit(&mut logs, "implement", &implemented);
    let mut outcome = if implemented.ok {
        measure(deps, &worktree, &artifacts)
    } else {
        let diag = implemented.diagnostic.as_deref().unwrap_or("agent failed");
        failed_outcome(deps.evaluator, deps.evaluator_config, &format!("agent failed: {diag}"))
    };

    let mut tries = 0;
    while !outcome.is_feasible() && tries < deps.debug_budget.get() {
        tries += 1;
        let request = EditRequest::debug(spec.clone(), context.clone(), outcome.record.clone(), worktree.clone());
        let fixed = deps.agent.apply_edits(&request);
        cost += fixed.cost;
        log_edit(&mut logs, &format!("debug-{tries}"), &fixed);
        outcome = if fixed.ok {
            measure(deps, &worktree, &artifacts)
        } else {
            let diag = fixed.diagnostic.as_deref().unwrap_or("agent failed");
            failed_outcome(deps.evaluator, deps.evaluator_config, &format!("agent failed: {diag}"))
        };
    }
    if !outcome.record.feedback.is_empty() {
        logs.insert("evaluation".into(), format!("{}\n", outcome.record.feedback));
    }

    let bundle = ArtifactBundle {
        spec: spec.clone(),
        parent_branch: spec.parent_branch.clone(),
        evaluator: deps.evaluator_name.to_string(),
        evaluator_config: deps.evaluator_config.clone(),
        beta,
        rollout_records: outcome.rollout_records.clone(),
        aggregated: outcome.record.clone(),
        utility_estimate: outcome.utility_estimate,
        debug_tries: tries,
        logs,
    };
    let committed = match ws.commit_run(&mut session, &bundle) {
        Ok(c) => c,
        Err(e) => {
            let _ = ws.abandon_session(&mut session);
            return Err(lifecycle(e));
        }
    };
    let published = ws.close_session(&mut session).map_err(lifecycle)?;

    Ok(ExperimentRecord {
        branch: branch.to_string(),
        parent_branch: spec.parent_branch.clone(),
        spec: spec.clone(),
        beta,
        rollouts: deps.evaluator_config.rollouts,
        utility_estimate: outcome.utility_estimate,
        aggregated: outcome,
        debug_tries: tries,
        cost,
        commit: Some(committed.commit),
        published: published.published,
        started_at,
        finished_at: Utc::now(),
    })
}

/// Index of the best record: the scalar argmax with the earliest index on
/// ties, or in preference mode the running best replaced only by a strictly
/// preferred record.
pub fn best_index(history: &[ExperimentRecord], evaluator: &dyn Evaluator) -> Option<usize> {
    let rule = evaluator.selection_rule();
    let mut best: Option<usize> = None;
    for (i, e) in history.iter().enumerate() {
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        let better = if rule.is_scalar() {
            e.aggregated.comparable_utility(&rule) > history[b].aggregated.comparable_utility(&rule)
        } else {
            evaluator.prefer(&e.aggregated, &history[b].aggregated) == Preference::ABetter
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn best_record<'a>(history: &'a [ExperimentRecord], evaluator: &dyn Evaluator) -> Option<&'a ExperimentRecord> {
    best_index(history, evaluator).map(|i| &history[i])
}

/// Branch of the best feasible experiment, or `root` if there is none.
pub fn best_feasible_branch(history: &[ExperimentRecord], evaluator: &dyn Evaluator, root: &str) -> String {
    match best_record(history, evaluator) {
        Some(e) if e.is_feasible() => e.branch.clone(),
        _ => root.to_string(),
    }
}
