//! Linear and tree strategies.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{ContextDocument, HistoryLine};
use crate::evaluator::Evaluator;
use crate::experiment::ExperimentRecord;

use super::tree::{tree_expand, tree_prune, tree_select, MarginPruner, Pruner, RecencySelector, SearchTree, Selector};
use super::{
    best_feasible_branch, implement_and_debug, ExperimentDeps, ProposalRequest, Proposer, SearchError, SolutionSpec,
    SpecOrigin,
};

#[derive(Debug, Clone, Copy)]
pub struct IterationInput<'a> {
    pub context: &'a ContextDocument,
    pub history: &'a [ExperimentRecord],
    pub beta: f64,
    /// Outer iteration, starting at 1.
    pub iteration: u64,
}

/// One call of `run` is one outer iteration.
pub trait SearchStrategy: Send {
    fn name(&self) -> &str;

    fn run(&mut self, input: &IterationInput<'_>, deps: &ExperimentDeps<'_>) -> Result<Vec<ExperimentRecord>, SearchError>;

    /// Inspectable state for the run manifest.
    fn state(&self, evaluator: &dyn Evaluator) -> Value;
}

fn history_lines(history: &[ExperimentRecord], evaluator: &dyn Evaluator) -> Vec<HistoryLine> {
    let rule = evaluator.selection_rule();
    history.iter().map(|e| HistoryLine::from_record(e, &rule)).collect()
}

/// Next linear spec: branch from the best feasible experiment so far.
pub fn linear_next(
    context: &ContextDocument,
    history: &[ExperimentRecord],
    proposer: &dyn Proposer,
    evaluator: &dyn Evaluator,
    root_branch: &str,
    ordinal: u64,
) -> Result<SolutionSpec, SearchError> {
    let parent_branch = best_feasible_branch(history, evaluator, root_branch);
    let parent_spec = history.iter().find(|e| e.branch == parent_branch).map(|e| &e.spec);
    let lines = history_lines(history, evaluator);
    let proposed = proposer
        .propose(&ProposalRequest {
            context,
            history: &lines,
            parent_branch: &parent_branch,
            parent_spec,
            origin: SpecOrigin::Linear,
            ordinal,
        })
        .map_err(SearchError::Proposer)?;
    Ok(SolutionSpec {
        spec_id: format!("spec-{ordinal}"),
        summary: proposed.summary,
        instructions: proposed.instructions,
        parent_branch,
        origin: SpecOrigin::Linear,
    })
}

pub struct LinearStrategy {
    proposer: Box<dyn Proposer>,
    next_ordinal: u64,
}

impl LinearStrategy {
    pub fn new(proposer: Box<dyn Proposer>) -> Self {
        Self { proposer, next_ordinal: 0 }
    }
}

impl SearchStrategy for LinearStrategy {
    fn name(&self) -> &str {
        "linear"
    }

    fn run(&mut self, input: &IterationInput<'_>, deps: &ExperimentDeps<'_>) -> Result<Vec<ExperimentRecord>, SearchError> {
        let root = deps.workspace.root_branch();
        let spec = linear_next(input.context, input.history, self.proposer.as_ref(), deps.evaluator, &root, self.next_ordinal)?;
        self.next_ordinal += 1;
        let branch = deps.workspace.allocate_branch();
        Ok(vec![implement_and_debug(&spec, input.context, &branch, input.beta, deps)?])
    }

    fn state(&self, _evaluator: &dyn Evaluator) -> Value {
        json!({ "strategy": "linear", "proposals": self.next_ordinal })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub fanout: usize,
    pub k: usize,
    pub margin: f64,
    /// Concurrent experiments per iteration.
    pub parallelism: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { fanout: 2, k: 2, margin: 10.0, parallelism: 2 }
    }
}

pub struct TreeStrategy {
    pub config: TreeConfig,
    proposer: Box<dyn Proposer>,
    pruner: Box<dyn Pruner>,
    selector: Box<dyn Selector>,
    tree: Option<SearchTree>,
    next_ordinal: u64,
}

impl TreeStrategy {
    pub fn new(config: TreeConfig, proposer: Box<dyn Proposer>) -> Self {
        Self {
            config,
            proposer,
            pruner: Box::new(MarginPruner { margin: config.margin }),
            selector: Box::new(RecencySelector),
            tree: None,
            next_ordinal: 0,
        }
    }

    pub fn with_pruner(mut self, pruner: Box<dyn Pruner>) -> Self {
        self.pruner = pruner;
        self
    }

    pub fn with_selector(mut self, selector: Box<dyn Selector>) -> Self {
        self.selector = selector;
        self
    }

    pub fn tree(&self) -> Option<&SearchTree> {
        self.tree.as_ref()
    }
}

impl SearchStrategy for TreeStrategy {
    fn name(&self) -> &str {
        "tree"
    }

    fn run(&mut self, input: &IterationInput<'_>, deps: &ExperimentDeps<'_>) -> Result<Vec<ExperimentRecord>, SearchError> {
        if self.config.k == 0 || self.config.fanout == 0 {
            return Err(SearchError::Usage("tree search needs k >= 1 and fanout >= 1".into()));
        }
        let tree = self.tree.get_or_insert_with(|| SearchTree::new(deps.workspace.root_branch()));
        let lines = history_lines(input.history, deps.evaluator);
        tree_prune(tree, input.context, self.pruner.as_ref(), deps.evaluator);
        tree_expand(
            tree,
            input.context,
            &lines,
            self.proposer.as_ref(),
            self.config.fanout,
            input.iteration,
            &mut self.next_ordinal,
            deps.evaluator,
        )?;
        let selected = tree_select(tree, input.context, self.config.k, self.selector.as_ref());

        // Branch names are fixed before anything runs, so the mapping from
        // node to branch does not depend on thread timing.
        let jobs: Vec<(String, SolutionSpec, String)> = selected
            .into_iter()
            .filter_map(|n| n.spec.map(|s| (n.node_id, s, deps.workspace.allocate_branch())))
            .collect();

        let parallelism = self.config.parallelism.max(1);
        let mut results: Vec<Result<ExperimentRecord, SearchError>> = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(parallelism) {
            let chunk_results: Vec<Result<ExperimentRecord, SearchError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(_, spec, branch)| {
                        scope.spawn(move || implement_and_debug(spec, input.context, branch, input.beta, deps))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(SearchError::Usage("experiment thread panicked".into()))))
                    .collect()
            });
            results.extend(chunk_results);
        }

        let mut records = Vec::with_capacity(jobs.len());
        for ((node_id, _, _), result) in jobs.iter().zip(results) {
            let record = result?;
            tree.record_outcome(node_id, record.clone())?;
            records.push(record);
        }
        Ok(records)
    }

    fn state(&self, evaluator: &dyn Evaluator) -> Value {
        match &self.tree {
            Some(tree) => json!({
                "strategy": "tree",
                "config": self.config,
                "nodes": tree.snapshot(evaluator),
            }),
            None => json!({ "strategy": "tree", "config": self.config, "nodes": [] }),
        }
    }
}
