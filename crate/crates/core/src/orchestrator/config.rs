//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::DEFAULT_CONTEXT_BUDGET;
use crate::evaluator::{BudgetSpec, EvaluatorConfig};
use crate::knowledge::RetrievalConfig;
use crate::memory::ControllerConfig;
use crate::search::{DebugBudget, TreeConfig};

use super::OrchestratorError;

/// A named plug-in plus its free-form parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginRef {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl PluginRef {
    pub fn named(name: &str) -> Self {
        Self { name: name.to_string(), params: Value::Null }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorSection {
    pub name: String,
    #[serde(default)]
    pub config: EvaluatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySection {
    pub name: String,
    #[serde(default)]
    pub debug_budget: DebugBudget,
    #[serde(default)]
    pub tree: TreeConfig,
    pub proposer: PluginRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeSection {
    pub retrieval: RetrievalConfig,
    pub vector_backend: String,
    pub graph_backend: String,
    /// Knowledge package to import at startup.
    pub package: Option<PathBuf>,
    /// Repositories to ingest at startup.
    pub repos: Vec<PathBuf>,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            vector_backend: "memory".into(),
            graph_backend: "memory".into(),
            package: None,
            repos: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub goal: String,
    /// Generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub budget: BudgetSpec,
    pub evaluator: EvaluatorSection,
    pub strategy: StrategySection,
    pub agent: PluginRef,
    #[serde(default)]
    pub knowledge: KnowledgeSection,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default = "default_context_budget")]
    pub context_budget: usize,
    pub state_dir: PathBuf,
}

fn default_context_budget() -> usize {
    DEFAULT_CONTEXT_BUDGET
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(text).map_err(|e| OrchestratorError::Config(format!("invalid run configuration: {e}")))
    }

    /// Load a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.state_dir);
        if let Some(p) = config.knowledge.package.as_mut() {
            resolve(p);
        }
        config.knowledge.repos.iter_mut().for_each(resolve);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.goal.trim().is_empty() {
            return bad("goal must not be empty".into());
        }
        self.budget.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.evaluator.config.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let r = &self.knowledge.retrieval;
        if !(0.0..=1.0).contains(&r.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", r.tau));
        }
        if r.max_pages == 0 || r.max_per_type == 0 {
            return bad("packet bounds must be positive".into());
        }
        if self.controller.f_max == 0 {
            return bad("f_max must be at least 1".into());
        }
        let t = &self.strategy.tree;
        if t.fanout == 0 || t.k == 0 || t.parallelism == 0 {
            return bad("tree fanout, k, and parallelism must be positive".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) {
                return bad(format!("run_id {id:?} may only contain letters, digits, '-', '_', '.'"));
            }
        }
        Ok(())
    }
}
