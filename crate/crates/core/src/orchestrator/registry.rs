//! Name → factory tables for every plug-in point.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use crate::agent::{CodingAgent, HttpAgent, HttpAgentConfig, ScriptedAgent, ScriptedPayload};
use crate::embedding::{Embedder, HashedBagOfWords};
use crate::evaluator::{builtin, Evaluator, EvaluatorConfig, BUILTIN_EVALUATORS};
use crate::knowledge::{GraphIndex, InMemoryGraphIndex, InMemoryVectorIndex, KnowledgeStore, RetrievalConfig, VectorIndex};
use crate::search::{
    EnsembleProposer, HttpProposer, LinearStrategy, PayloadSequenceProposer, Proposer, SearchStrategy, TreeStrategy,
};

use super::{OrchestratorError, RunConfig};

pub type EvaluatorFactory = Box<dyn Fn(&EvaluatorConfig) -> Result<Box<dyn Evaluator>, String> + Send + Sync>;
pub type AgentFactory = Box<dyn Fn(&Value) -> Result<Box<dyn CodingAgent>, String> + Send + Sync>;
pub type ProposerFactory = Box<dyn Fn(&Value, &Registry) -> Result<Box<dyn Proposer>, String> + Send + Sync>;
pub type StrategyFactory =
    Box<dyn Fn(&RunConfig, Box<dyn Proposer>) -> Result<Box<dyn SearchStrategy>, String> + Send + Sync>;
pub type VectorFactory = Box<dyn Fn() -> Box<dyn VectorIndex> + Send + Sync>;
pub type GraphFactory = Box<dyn Fn() -> Box<dyn GraphIndex> + Send + Sync>;

fn params<T: serde::de::DeserializeOwned>(value: &Value) -> Result<T, String> {
    serde_json::from_value(value.clone()).map_err(|e| e.to_string())
}

/// Plug-in tables. [`Registry::default`] holds the built-ins.
pub struct Registry {
    evaluators: BTreeMap<String, EvaluatorFactory>,
    agents: BTreeMap<String, AgentFactory>,
    proposers: BTreeMap<String, ProposerFactory>,
    strategies: BTreeMap<String, StrategyFactory>,
    vector_backends: BTreeMap<String, VectorFactory>,
    graph_backends: BTreeMap<String, GraphFactory>,
    embedder: Arc<dyn Embedder>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self::empty();
        for name in BUILTIN_EVALUATORS {
            let owned = name.to_string();
            r.register_evaluator(name, move |cfg| match builtin(&owned, cfg) {
                Ok(Some(ev)) => Ok(ev),
                Ok(None) => Err(format!("unknown evaluator {owned}")),
                Err(e) => Err(e.to_string()),
            });
        }
        r.register_agent("scripted", |_| Ok(Box::new(ScriptedAgent)));
        r.register_agent("http", |p| Ok(Box::new(HttpAgent::new(params::<HttpAgentConfig>(p)?))));
        r.register_proposer("payload_sequence", |p, _| {
            let payloads: Vec<ScriptedPayload> = params(p.get("payloads").unwrap_or(&Value::Null))?;
            Ok(Box::new(PayloadSequenceProposer::new(payloads)?))
        });
        r.register_proposer("http", |p, _| Ok(Box::new(HttpProposer::new(params::<HttpAgentConfig>(p)?))));
        r.register_proposer("ensemble", |p, reg| {
            let members: Vec<crate::orchestrator::PluginRef> = params(p.get("members").unwrap_or(&Value::Null))?;
            let built = members.iter().map(|m| reg.proposer(&m.name, &m.params)).collect::<Result<Vec<_>, _>>()?;
            Ok(Box::new(EnsembleProposer::new(built)?))
        });
        r.register_strategy("linear", |_, proposer| Ok(Box::new(LinearStrategy::new(proposer))));
        r.register_strategy("tree", |cfg, proposer| Ok(Box::new(TreeStrategy::new(cfg.strategy.tree, proposer))));
        r.register_vector_backend("memory", || Box::new(InMemoryVectorIndex::default()));
        r.register_graph_backend("memory", || Box::new(InMemoryGraphIndex::default()));
        r
    }
}

fn unknown(kind: &str, name: &str, available: Vec<&String>) -> String {
    let list: Vec<&str> = available.into_iter().map(String::as_str).collect();
    format!("unknown {kind} {name:?}; available: {}", list.join(", "))
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            evaluators: BTreeMap::new(),
            agents: BTreeMap::new(),
            proposers: BTreeMap::new(),
            strategies: BTreeMap::new(),
            vector_backends: BTreeMap::new(),
            graph_backends: BTreeMap::new(),
            embedder: Arc::new(HashedBagOfWords::default()),
        }
    }

    pub fn register_evaluator(
        &mut self,
        name: &str,
        f: impl Fn(&EvaluatorConfig) -> Result<Box<dyn Evaluator>, String> + Send + Sync + 'static,
    ) {
        self.evaluators.insert(name.to_string(), Box::new(f));
    }

    pub fn register_agent(
        &mut self,
        name: &str,
        f: impl Fn(&Value) -> Result<Box<dyn CodingAgent>, String> + Send + Sync + 'static,
    ) {
        self.agents.insert(name.to_string(), Box::new(f));
    }

    pub fn register_proposer(
        &mut self,
        name: &str,
        f: impl Fn(&Value, &Registry) -> Result<Box<dyn Proposer>, String> + Send + Sync + 'static,
    ) {
        self.proposers.insert(name.to_string(), Box::new(f));
    }

    pub fn register_strategy(
        &mut self,
        name: &str,
        f: impl Fn(&RunConfig, Box<dyn Proposer>) -> Result<Box<dyn SearchStrategy>, String> + Send + Sync + 'static,
    ) {
        self.strategies.insert(name.to_string(), Box::new(f));
    }

    pub fn register_vector_backend(&mut self, name: &str, f: impl Fn() -> Box<dyn VectorIndex> + Send + Sync + 'static) {
        self.vector_backends.insert(name.to_string(), Box::new(f));
    }

    pub fn register_graph_backend(&mut self, name: &str, f: impl Fn() -> Box<dyn GraphIndex> + Send + Sync + 'static) {
        self.graph_backends.insert(name.to_string(), Box::new(f));
    }

    pub fn set_embedder(&mut self, embedder: Arc<dyn Embedder>) {
        self.embedder = embedder;
    }

    pub fn evaluator(&self, name: &str, config: &EvaluatorConfig) -> Result<Box<dyn Evaluator>, String> {
        let f = self.evaluators.get(name).ok_or_else(|| unknown("evaluator", name, self.evaluators.keys().collect()))?;
        f(config)
    }

    pub fn agent(&self, name: &str, params: &Value) -> Result<Box<dyn CodingAgent>, String> {
        let f = self.agents.get(name).ok_or_else(|| unknown("agent", name, self.agents.keys().collect()))?;
        f(params)
    }

    pub fn proposer(&self, name: &str, params: &Value) -> Result<Box<dyn Proposer>, String> {
        let f = self.proposers.get(name).ok_or_else(|| unknown("proposer", name, self.proposers.keys().collect()))?;
        f(params, self)
    }

    pub fn strategy(&self, config: &RunConfig, proposer: Box<dyn Proposer>) -> Result<Box<dyn SearchStrategy>, String> {
        let name = &config.strategy.name;
        let f = self.strategies.get(name).ok_or_else(|| unknown("strategy", name, self.strategies.keys().collect()))?;
        f(config, proposer)
    }

    pub fn knowledge_store(&self, retrieval: RetrievalConfig, vector: &str, graph: &str) -> Result<KnowledgeStore, String> {
        let v = self
            .vector_backends
            .get(vector)
            .ok_or_else(|| unknown("vector backend", vector, self.vector_backends.keys().collect()))?;
        let g = self
            .graph_backends
            .get(graph)
            .ok_or_else(|| unknown("graph backend", graph, self.graph_backends.keys().collect()))?;
        Ok(KnowledgeStore::with_backends(retrieval, self.embedder.clone(), v(), g()))
    }

    /// Resolve every plug-in a config names, failing on the first unknown
    /// or misconfigured one.
    pub fn check(&self, config: &RunConfig) -> Result<(), OrchestratorError> {
        let plugin = |e: String| OrchestratorError::Plugin(e);
        self.evaluator(&config.evaluator.name, &config.evaluator.config).map_err(plugin)?;
        self.agent(&config.agent.name, &config.agent.params).map_err(plugin)?;
        let proposer = self.proposer(&config.strategy.proposer.name, &config.strategy.proposer.params).map_err(plugin)?;
        self.strategy(config, proposer).map_err(plugin)?;
        self.knowledge_store(
            config.knowledge.retrieval.clone(),
            &config.knowledge.vector_backend,
            &config.knowledge.graph_backend,
        )
        .map_err(plugin)?;
        Ok(())
    }
}
