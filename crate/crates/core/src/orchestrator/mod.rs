//! The outer solve loop.
//!
//! One run: choose a seed repository or scaffold, then iterate
//! context → strategy → accounting → controller until the budget runs out,
//! the evaluator says stop, or the controller completes. Every iteration is
//! persisted to `<state>/runs/<run_id>/manifest.json`.

mod config;
mod registry;

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{render_context, CodingAgent, ContextDocument, ContextParts, HistoryLine};
use crate::canonical::{ext_real, to_canonical_pretty};
use crate::evaluator::{budget_progress, BudgetSpec, Consumed, Evaluator, Status};
use crate::experiment::{ExperimentError, ExperimentRecord, InitSource, Workspace};
use crate::knowledge::{import_package, IngestOptions, InitDecision, KnowledgeError, KnowledgePacket, KnowledgeStore};
use crate::memory::{
    Controller, ControllerAction, EpisodicLesson, EpisodicStore, LessonExtractor, MemoryError, StepInput,
    TemplateExtractor,
};
use crate::search::{best_index, ExperimentDeps, IterationInput, SearchStrategy};

pub use config::{EvaluatorSection, KnowledgeSection, PluginRef, RunConfig, StrategySection};
pub use registry::Registry;

pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("plug-in error: {0}")]
    Plugin(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
}

impl OrchestratorError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Everything a run needs, already built.
pub struct Components {
    pub evaluator: Box<dyn Evaluator>,
    pub agent: Box<dyn CodingAgent>,
    pub strategy: Box<dyn SearchStrategy>,
    pub knowledge: KnowledgeStore,
    pub extractor: Box<dyn LessonExtractor>,
}

impl Components {
    /// Build from the registry, importing and ingesting whatever the
    /// knowledge section names.
    pub fn from_registry(config: &RunConfig, registry: &Registry) -> Result<Self, OrchestratorError> {
        let plugin = OrchestratorError::Plugin;
        let evaluator = registry.evaluator(&config.evaluator.name, &config.evaluator.config).map_err(plugin)?;
        let agent = registry.agent(&config.agent.name, &config.agent.params).map_err(plugin)?;
        let proposer = registry.proposer(&config.strategy.proposer.name, &config.strategy.proposer.params).map_err(plugin)?;
        let strategy = registry.strategy(config, proposer).map_err(plugin)?;
        let k = &config.knowledge;
        let mut knowledge =
            registry.knowledge_store(k.retrieval.clone(), &k.vector_backend, &k.graph_backend).map_err(plugin)?;
        if let Some(dir) = &k.package {
            let imported = import_package(dir, k.retrieval.clone())?;
            for repo in imported.repos() {
                knowledge.add_repo(repo.clone())?;
            }
            knowledge.index_pages(imported.pages().cloned().collect())?;
        }
        for repo in &k.repos {
            knowledge.ingest(repo, &IngestOptions::default())?;
        }
        Ok(Self { evaluator, agent, strategy, knowledge, extractor: Box::new(TemplateExtractor) })
    }
}

/// Resources charged by one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccountEvent {
    pub wall_time_ms: u64,
    pub cost: f64,
}

/// Charge one iteration. Negative or non-finite cost is rejected.
pub fn account(consumed: &Consumed, event: AccountEvent) -> Result<Consumed, OrchestratorError> {
    if !event.cost.is_finite() || event.cost < 0.0 {
        return Err(OrchestratorError::Usage(format!("cost must be finite and non-negative, got {}", event.cost)));
    }
    Ok(Consumed {
        iterations: consumed.iterations + 1,
        wall_time_ms: consumed.wall_time_ms.saturating_add(event.wall_time_ms),
        cost: consumed.cost + event.cost,
    })
}

/// Best experiment under the evaluator's selection rule.
pub fn best_artifact<'a>(history: &'a [ExperimentRecord], evaluator: &dyn Evaluator) -> Option<&'a ExperimentRecord> {
    best_index(history, evaluator).map(|i| &history[i])
}

/// Context for one iteration: problem statement at β, packet, lessons, and
/// a one-line summary per past experiment.
pub fn build_context(
    goal: &str,
    evaluator: &dyn Evaluator,
    beta: f64,
    packet: &KnowledgePacket,
    lessons: &[EpisodicLesson],
    history: &[ExperimentRecord],
    budget_chars: usize,
) -> ContextDocument {
    let problem = evaluator.problem_context(beta);
    let problem = ContextDocument::new(format!("Goal: {goal}\n\n{}", problem.text));
    let rule = evaluator.selection_rule();
    let lines: Vec<HistoryLine> = history.iter().map(|e| HistoryLine::from_record(e, &rule)).collect();
    render_context(
        &ContextParts { problem: Some(&problem), packet: Some(packet), lessons, history: &lines },
        budget_chars,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub decision: String,
    pub repo_id: Option<String>,
    pub commit_id: Option<String>,
    #[serde(with = "ext_real")]
    pub rho: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub branch: String,
    pub parent_branch: String,
    pub spec_id: String,
    pub summary: String,
    pub status: Status,
    #[serde(with = "ext_real::option", default)]
    pub utility: Option<f64>,
    pub rollouts: u32,
    pub debug_tries: u32,
    pub cost: f64,
    pub commit: Option<String>,
    pub published: bool,
}

impl ExperimentSummary {
    fn of(e: &ExperimentRecord) -> Self {
        Self {
            branch: e.branch.clone(),
            parent_branch: e.parent_branch.clone(),
            spec_id: e.spec.spec_id.clone(),
            summary: e.spec.summary.clone(),
            status: e.aggregated.record.status,
            utility: e.utility_estimate,
            rollouts: e.rollouts,
            debug_tries: e.debug_tries,
            cost: e.cost,
            commit: e.commit.clone(),
            published: e.published,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketSummary {
    pub seed_repo: Option<String>,
    pub page_ids: Vec<String>,
    pub recovery_pages: Vec<String>,
}

impl PacketSummary {
    fn of(p: &KnowledgePacket) -> Self {
        Self {
            seed_repo: p.seed_repo.as_ref().map(|s| s.entry.repo_id.clone()),
            page_ids: p.page_ids(),
            recovery_pages: p.recovery.as_ref().map(|r| r.attached.clone()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub iteration: u64,
    pub beta: f64,
    pub beta_after: f64,
    pub consumed_after: Consumed,
    pub action: Option<ControllerAction>,
    pub experiments: Vec<ExperimentSummary>,
    pub packet: PacketSummary,
    pub new_lessons: Vec<String>,
    pub consecutive_failures: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    EvaluatorStop,
    ControllerComplete,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub goal: String,
    pub config: Value,
    pub init: InitSummary,
    pub workspace: PathBuf,
    pub root_branch: String,
    pub iterations: Vec<IterationEntry>,
    pub best_branch: Option<String>,
    pub best_feasible: bool,
    pub totals: Consumed,
    pub stop_reason: Option<StopReason>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub strategy_state: Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Atomic write: temp file then rename.
    pub fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, to_canonical_pretty(self)?).map_err(|e| OrchestratorError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| OrchestratorError::io(path, e))
    }

    /// 0 with a feasible best artifact, 2 when every experiment failed or
    /// none ran, 1 when the run aborted.
    pub fn exit_code(&self) -> i32 {
        match (self.status, self.best_feasible) {
            (RunStatus::Aborted, _) => 1,
            (_, true) => 0,
            _ => 2,
        }
    }
}

/// Result of [`solve_with`].
#[derive(Debug)]
pub struct SolveOutcome {
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
    pub history: Vec<ExperimentRecord>,
}

impl SolveOutcome {
    pub fn best(&self) -> Option<&ExperimentRecord> {
        let branch = self.manifest.best_branch.as_deref()?;
        self.history.iter().find(|e| e.branch == branch)
    }
}

pub fn runs_dir(state_dir: &Path) -> PathBuf {
    state_dir.join("runs")
}

pub fn run_dir(state_dir: &Path, run_id: &str) -> PathBuf {
    runs_dir(state_dir).join(run_id)
}

pub fn manifest_path(state_dir: &Path, run_id: &str) -> PathBuf {
    run_dir(state_dir, run_id).join("manifest.json")
}

pub fn episodic_path(state_dir: &Path) -> PathBuf {
    state_dir.join("episodic").join("lessons.jsonl")
}

/// Load a finished or running run's manifest and reopen its workspace.
pub fn open_run(state_dir: &Path, run_id: &str) -> Result<(RunManifest, Workspace), OrchestratorError> {
    let path = manifest_path(state_dir, run_id);
    if !path.exists() {
        return Err(OrchestratorError::UnknownRun(run_id.to_string()));
    }
    let manifest = RunManifest::load(&path)?;
    let ws = Workspace::open(&manifest.workspace, run_id)?;
    Ok((manifest, ws))
}

fn generate_run_id() -> String {
    let suffix: u32 = rand::rng().random();
    format!("{}-{suffix:08x}", Utc::now().format("%Y%m%dT%H%M%S"))
}

/// Build components from `registry` and run.
pub fn solve(config: &RunConfig, registry: &Registry) -> Result<SolveOutcome, OrchestratorError> {
    config.validate()?;
    let components = Components::from_registry(config, registry)?;
    solve_with(config, components)
}

fn init_workspace(
    config: &RunConfig,
    knowledge: &KnowledgeStore,
    evaluator: &dyn Evaluator,
    dir: &Path,
    run_id: &str,
) -> Result<(Workspace, InitDecision, f64), OrchestratorError> {
    let (decision, rho) = knowledge.select_seed(&config.goal, &[]);
    let source = match &decision {
        InitDecision::Seed { entry, .. } => {
            let path = PathBuf::from(&entry.location);
            if !path.is_dir() {
                return Err(OrchestratorError::Init(format!(
                    "seed repository {} is not a local directory: {}",
                    entry.repo_id, entry.location
                )));
            }
            InitSource::Snapshot { path }
        }
        InitDecision::Scaffold => InitSource::Scaffold {
            goal: config.goal.clone(),
            entrypoint: evaluator.entrypoint().map(str::to_string),
        },
    };
    let ws = Workspace::init(dir, &source, run_id)?;
    Ok((ws, decision, rho))
}

/// Run the outer loop with prebuilt components.
pub fn solve_with(config: &RunConfig, components: Components) -> Result<SolveOutcome, OrchestratorError> {
    config.validate()?;
    let Components { evaluator, agent, mut strategy, knowledge, extractor } = components;
    let run_id = config.run_id.clone().unwrap_or_else(generate_run_id);
    let dir = run_dir(&config.state_dir, &run_id);
    if dir.exists() {
        return Err(OrchestratorError::Usage(format!("run {run_id} already exists at {}", dir.display())));
    }
    std::fs::create_dir_all(&dir).map_err(|e| OrchestratorError::io(&dir, e))?;
    let manifest_file = dir.join("manifest.json");
    let mut episodic = EpisodicStore::open(&episodic_path(&config.state_dir))?;
    episodic.top_m = config.controller.top_m;

    let (ws, decision, rho) = init_workspace(config, &knowledge, evaluator.as_ref(), &dir.join("workspace"), &run_id)?;
    let seed = decision.seed_ref();
    let mut packet = knowledge.retrieve_knowledge(&config.goal, seed.as_ref(), None);

    let mut manifest = RunManifest {
        format_version: RUN_MANIFEST_VERSION,
        run_id: run_id.clone(),
        goal: config.goal.clone(),
        config: serde_json::to_value(config)?,
        init: InitSummary {
            decision: if decision.is_seed() { "seed" } else { "scaffold" }.into(),
            repo_id: seed.as_ref().map(|s| s.entry.repo_id.clone()),
            commit_id: seed.as_ref().map(|s| s.entry.commit_id.clone()),
            rho,
            tau: knowledge.config.tau,
        },
        workspace: ws.root().to_path_buf(),
        root_branch: ws.root_branch(),
        iterations: Vec::new(),
        best_branch: None,
        best_feasible: false,
        totals: Consumed::default(),
        stop_reason: None,
        status: RunStatus::Running,
        error: None,
        strategy_state: strategy.state(evaluator.as_ref()),
        started_at: Utc::now(),
        finished_at: None,
    };
    manifest.save(&manifest_file)?;

    let deps = ExperimentDeps {
        workspace: &ws,
        evaluator: evaluator.as_ref(),
        evaluator_name: &config.evaluator.name,
        evaluator_config: &config.evaluator.config,
        agent: agent.as_ref(),
        debug_budget: config.strategy.debug_budget,
    };
    let mut controller = Controller::new(config.controller);
    let mut history: Vec<ExperimentRecord> = Vec::new();
    let mut lessons: Vec<EpisodicLesson> = episodic.retrieve(&config.goal, None);
    let mut consumed = Consumed::default();

    let stop_reason = loop {
        let beta = budget_progress(&config.budget, &consumed);
        if beta >= 1.0 {
            break StopReason::BudgetExhausted;
        }
        if evaluator.should_stop(beta, &history) {
            break StopReason::EvaluatorStop;
        }
        let iteration = consumed.iterations + 1;
        let context =
            build_context(&config.goal, evaluator.as_ref(), beta, &packet, &lessons, &history, config.context_budget);
        let started = Instant::now();
        let input = IterationInput { context: &context, history: &history, beta, iteration };
        let result = strategy.run(&input, &deps);
        let batch = match result {
            Ok(batch) => batch,
            Err(e) => {
                manifest.iterations.push(IterationEntry {
                    iteration,
                    beta,
                    beta_after: beta,
                    consumed_after: consumed,
                    action: None,
                    experiments: Vec::new(),
                    packet: PacketSummary::of(&packet),
                    new_lessons: Vec::new(),
                    consecutive_failures: controller.consecutive_failures(),
                    error: Some(e.to_string()),
                });
                manifest.error = Some(e.to_string());
                break StopReason::Aborted;
            }
        };
        let event = AccountEvent {
            wall_time_ms: started.elapsed().as_millis() as u64,
            cost: batch.iter().map(|e| e.cost).sum(),
        };
        consumed = account(&consumed, event)?;
        let beta_after = budget_progress(&config.budget, &consumed);
        history.extend(batch.iter().cloned());

        let mut action = None;
        let mut new_lessons = Vec::new();
        if let Some(focus_idx) = best_index(&batch, evaluator.as_ref()) {
            let goal_met = batch.iter().any(|e| evaluator.goal_reached(&e.aggregated));
            let step = controller.step(
                &StepInput {
                    goal: &config.goal,
                    run_id: &run_id,
                    experiments: &batch,
                    focus: &batch[focus_idx],
                    packet: &packet,
                    beta: beta_after,
                    should_stop: evaluator.should_stop(beta_after, &history),
                    goal_met,
                },
                &knowledge,
                &mut episodic,
                extractor.as_ref(),
            )?;
            packet = step.packet;
            lessons = step.lessons;
            new_lessons = step.new_lessons.iter().map(|l| l.lesson_id.clone()).collect();
            action = Some(step.action);
        }

        manifest.iterations.push(IterationEntry {
            iteration,
            beta,
            beta_after,
            consumed_after: consumed,
            action,
            experiments: batch.iter().map(ExperimentSummary::of).collect(),
            packet: PacketSummary::of(&packet),
            new_lessons,
            consecutive_failures: controller.consecutive_failures(),
            error: None,
        });
        update_best(&mut manifest, &history, evaluator.as_ref());
        manifest.totals = consumed;
        manifest.strategy_state = strategy.state(evaluator.as_ref());
        manifest.save(&manifest_file)?;
        if action == Some(ControllerAction::Complete) {
            break if beta_after >= 1.0 { StopReason::BudgetExhausted } else { StopReason::ControllerComplete };
        }
    };

    update_best(&mut manifest, &history, evaluator.as_ref());
    manifest.totals = consumed;
    manifest.strategy_state = strategy.state(evaluator.as_ref());
    manifest.stop_reason = Some(stop_reason);
    manifest.status = if stop_reason == StopReason::Aborted { RunStatus::Aborted } else { RunStatus::Finished };
    manifest.finished_at = Some(Utc::now());
    manifest.save(&manifest_file)?;
    Ok(SolveOutcome { manifest, run_dir: dir, history })
}

fn update_best(manifest: &mut RunManifest, history: &[ExperimentRecord], evaluator: &dyn Evaluator) {
    let best = best_artifact(history, evaluator);
    manifest.best_branch = best.map(|e| e.branch.clone());
    manifest.best_feasible = best.is_some_and(ExperimentRecord::is_feasible);
}

/// Validate a budget on its own, for callers that build configs by hand.
pub fn check_budget(budget: &BudgetSpec) -> Result<(), OrchestratorError> {
    budget.validate().map_err(|e| OrchestratorError::Config(e.to_string()))
}

#[cfg(test)]
mod tests;
