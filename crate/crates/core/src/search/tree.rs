//! The search tree and its prune / expand / select phases.
//!
//! Node `n0` is the root and stands for the run's root branch. Other nodes
//! are proposed specs; once executed they carry their experiment record.

use serde::{Deserialize, Serialize};

use crate::agent::{ContextDocument, HistoryLine};
use crate::canonical::ext_real;
use crate::evaluator::{Evaluator, Preference};
use crate::experiment::ExperimentRecord;

use super::{ProposalRequest, Proposer, SearchError, SolutionSpec, SpecOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    /// The root branch placeholder; never executed, pruned, or selected.
    Root,
    Proposed,
    Executed,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub node_id: String,
    /// Absent only for the root.
    pub spec: Option<SolutionSpec>,
    pub outcome: Option<ExperimentRecord>,
    pub status: NodeStatus,
    pub children: Vec<String>,
    pub parent: Option<String>,
    /// Outer iteration in which the node was proposed.
    pub created_iteration: u64,
}

impl SearchNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshotRow {
    pub node_id: String,
    pub parent: Option<String>,
    pub status: NodeStatus,
    pub spec_id: Option<String>,
    pub branch: Option<String>,
    #[serde(with = "ext_real::option", default)]
    pub utility: Option<f64>,
    pub children: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub root_branch: String,
    nodes: Vec<SearchNode>,
}

fn node_id(index: usize) -> String {
    format!("n{index}")
}

impl SearchTree {
    pub fn new(root_branch: impl Into<String>) -> Self {
        let root = SearchNode {
            node_id: node_id(0),
            spec: None,
            outcome: None,
            status: NodeStatus::Root,
            children: Vec::new(),
            parent: None,
            created_iteration: 0,
        };
        Self { root_branch: root_branch.into(), nodes: vec![root] }
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        let i: usize = id.strip_prefix('n')?.parse().ok()?;
        (i < self.nodes.len() && self.nodes[i].node_id == id).then_some(i)
    }

    pub fn get(&self, id: &str) -> Option<&SearchNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Branch that children of `node` start from.
    pub fn branch_of(&self, node: &SearchNode) -> String {
        match &node.outcome {
            Some(e) => e.branch.clone(),
            None => self.root_branch.clone(),
        }
    }

    fn add_child(&mut self, parent: usize, spec: SolutionSpec, iteration: u64) -> usize {
        let index = self.nodes.len();
        let id = node_id(index);
        self.nodes[parent].children.push(id.clone());
        self.nodes.push(SearchNode {
            node_id: id,
            spec: Some(spec),
            outcome: None,
            status: NodeStatus::Proposed,
            children: Vec::new(),
            parent: Some(self.nodes[parent].node_id.clone()),
            created_iteration: iteration,
        });
        index
    }

    /// Attach an outcome to a proposed node.
    pub fn record_outcome(&mut self, id: &str, outcome: ExperimentRecord) -> Result<(), SearchError> {
        let i = self.index_of(id).ok_or_else(|| SearchError::Usage(format!("unknown node {id}")))?;
        if self.nodes[i].status != NodeStatus::Proposed {
            return Err(SearchError::Usage(format!("node {id} is {:?}, not proposed", self.nodes[i].status)));
        }
        self.nodes[i].outcome = Some(outcome);
        self.nodes[i].status = NodeStatus::Executed;
        Ok(())
    }

    /// Best executed, non-pruned node under the evaluator's selection rule.
    pub fn best_executed(&self, evaluator: &dyn Evaluator) -> Option<usize> {
        let rule = evaluator.selection_rule();
        let mut best: Option<usize> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.status != NodeStatus::Executed {
                continue;
            }
            let Some(o) = &n.outcome else { continue };
            let Some(b) = best else {
                best = Some(i);
                continue;
            };
            let Some(current) = self.nodes[b].outcome.as_ref().map(|e| &e.aggregated) else { continue };
            let better = if rule.is_scalar() {
                o.aggregated.comparable_utility(&rule) > current.comparable_utility(&rule)
            } else {
                evaluator.prefer(&o.aggregated, current) == Preference::ABetter
            };
            if better {
                best = Some(i);
            }
        }
        best
    }

    pub fn snapshot(&self, evaluator: &dyn Evaluator) -> Vec<TreeSnapshotRow> {
        let rule = evaluator.selection_rule();
        self.nodes
            .iter()
            .map(|n| TreeSnapshotRow {
                node_id: n.node_id.clone(),
                parent: n.parent.clone(),
                status: n.status,
                spec_id: n.spec.as_ref().map(|s| s.spec_id.clone()),
                branch: n.outcome.as_ref().map(|e| e.branch.clone()),
                utility: n.outcome.as_ref().and_then(|e| rule.is_scalar().then(|| e.aggregated.comparable_utility(&rule))),
                children: n.children.clone(),
            })
            .collect()
    }

    /// Single root, parent links acyclic and consistent with child lists,
    /// executed nodes carry outcomes.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_id != node_id(i) {
                return Err(format!("node {i} has id {}", n.node_id));
            }
            match (&n.parent, i) {
                (None, 0) => {}
                (None, _) => return Err(format!("{} has no parent", n.node_id)),
                (Some(_), 0) => return Err("root has a parent".into()),
                (Some(p), _) => {
                    let pi = self.index_of(p).ok_or_else(|| format!("{} has unknown parent {p}", n.node_id))?;
                    if pi >= i {
                        return Err(format!("{} has a later parent {p}", n.node_id));
                    }
                    if !self.nodes[pi].children.contains(&n.node_id) {
                        return Err(format!("{p} does not list child {}", n.node_id));
                    }
                }
            }
            for c in &n.children {
                let ci = self.index_of(c).ok_or_else(|| format!("{} lists unknown child {c}", n.node_id))?;
                if self.nodes[ci].parent.as_deref() != Some(n.node_id.as_str()) {
                    return Err(format!("{c} does not point back to {}", n.node_id));
                }
            }
            if n.status == NodeStatus::Executed && n.outcome.is_none() {
                return Err(format!("{} is executed without an outcome", n.node_id));
            }
        }
        Ok(())
    }
}

pub trait Pruner: Send + Sync {
    /// Ids of leaves to prune.
    fn prune(&self, tree: &SearchTree, context: &ContextDocument, evaluator: &dyn Evaluator) -> Vec<String>;
}

/// Prunes executed leaves whose utility trails the best by more than
/// `margin`. In preference mode, prunes infeasible executed leaves once a
/// feasible one exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPruner {
    pub margin: f64,
}

impl Default for MarginPruner {
    fn default() -> Self {
        Self { margin: 10.0 }
    }
}

impl Pruner for MarginPruner {
    fn prune(&self, tree: &SearchTree, _context: &ContextDocument, evaluator: &dyn Evaluator) -> Vec<String> {
        let rule = evaluator.selection_rule();
        let executed: Vec<&SearchNode> = tree
            .nodes()
            .iter()
            .filter(|n| n.status == NodeStatus::Executed && n.outcome.is_some())
            .collect();
        if rule.is_scalar() {
            let utility = |n: &SearchNode| n.outcome.as_ref().map_or(f64::NEG_INFINITY, |e| e.aggregated.comparable_utility(&rule));
            let best = executed.iter().map(|n| utility(n)).fold(f64::NEG_INFINITY, f64::max);
            executed
                .iter()
                .filter(|n| n.is_leaf() && utility(n) < best - self.margin)
                .map(|n| n.node_id.clone())
                .collect()
        } else {
            let any_feasible = executed.iter().any(|n| n.outcome.as_ref().is_some_and(|e| e.is_feasible()));
            executed
                .iter()
                .filter(|n| any_feasible && n.is_leaf() && n.outcome.as_ref().is_some_and(|e| !e.is_feasible()))
                .map(|n| n.node_id.clone())
                .collect()
        }
    }
}

pub trait Selector: Send + Sync {
    /// Up to `k` proposed leaves to execute, in execution order.
    fn select(&self, tree: &SearchTree, context: &ContextDocument, k: usize) -> Vec<String>;
}

/// Newest proposals first, then node id order.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecencySelector;

impl Selector for RecencySelector {
    fn select(&self, tree: &SearchTree, _context: &ContextDocument, k: usize) -> Vec<String> {
        let mut candidates: Vec<(u64, usize)> = tree
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.status == NodeStatus::Proposed && n.is_leaf())
            .map(|(i, n)| (n.created_iteration, i))
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.into_iter().take(k).map(|(_, i)| tree.nodes()[i].node_id.clone()).collect()
    }
}

/// Mark the pruner's choices. Only executed or proposed leaves can be
/// pruned; anything else the pruner names is ignored.
pub fn tree_prune(
    tree: &mut SearchTree,
    context: &ContextDocument,
    pruner: &dyn Pruner,
    evaluator: &dyn Evaluator,
) -> Vec<String> {
    let mut pruned = Vec::new();
    for id in pruner.prune(tree, context, evaluator) {
        let Some(i) = tree.index_of(&id) else { continue };
        let node = &mut tree.nodes[i];
        if node.is_leaf() && matches!(node.status, NodeStatus::Executed | NodeStatus::Proposed) {
            node.status = NodeStatus::Pruned;
            pruned.push(id);
        }
    }
    pruned
}

/// Attach `fanout` children to each expansion target: the best executed
/// node (the root when nothing has run), then the least-expanded live node
/// when it differs. Returns the new nodes.
#[allow(clippy::too_many_arguments)]
pub fn tree_expand(
    tree: &mut SearchTree,
    context: &ContextDocument,
    history: &[HistoryLine],
    proposer: &dyn Proposer,
    fanout: usize,
    iteration: u64,
    next_ordinal: &mut u64,
    evaluator: &dyn Evaluator,
) -> Result<Vec<SearchNode>, SearchError> {
    if fanout == 0 {
        return Err(SearchError::Usage("fanout must be at least 1".into()));
    }
    let exploit = tree.best_executed(evaluator).unwrap_or(0);
    let explore = tree
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.status, NodeStatus::Root | NodeStatus::Executed))
        .min_by_key(|(i, n)| (n.children.len(), *i))
        .map(|(i, _)| i);
    let mut targets = vec![exploit];
    if let Some(e) = explore {
        if e != exploit {
            targets.push(e);
        }
    }

    let mut created = Vec::new();
    for target in targets {
        let parent_branch = tree.branch_of(&tree.nodes[target]);
        let parent_spec = tree.nodes[target].spec.clone();
        for _ in 0..fanout {
            let ordinal = *next_ordinal;
            let proposed = proposer
                .propose(&ProposalRequest {
                    context,
                    history,
                    parent_branch: &parent_branch,
                    parent_spec: parent_spec.as_ref(),
                    origin: SpecOrigin::TreeExpand,
                    ordinal,
                })
                .map_err(SearchError::Proposer)?;
            *next_ordinal += 1;
            let spec = SolutionSpec {
                spec_id: format!("spec-{ordinal}"),
                summary: proposed.summary,
                instructions: proposed.instructions,
                parent_branch: parent_branch.clone(),
                origin: SpecOrigin::TreeExpand,
            };
            let i = tree.add_child(target, spec, iteration);
            created.push(tree.nodes[i].clone());
        }
    }
    Ok(created)
}

/// The selector's choice, filtered to proposed leaves and capped at `k`.
pub fn tree_select(tree: &SearchTree, context: &ContextDocument, k: usize, selector: &dyn Selector) -> Vec<SearchNode> {
    let mut out: Vec<SearchNode> = Vec::new();
    for id in selector.select(tree, context, k) {
        if out.len() >= k {
            break;
        }
        let Some(node) = tree.get(&id) else { continue };
        if node.status == NodeStatus::Proposed && node.is_leaf() && !out.iter().any(|n| n.node_id == id) {
            out.push(node.clone());
        }
    }
    out
}
