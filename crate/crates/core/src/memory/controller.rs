//! RETRY / PIVOT / COMPLETE decisions after each iteration.

use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentRecord;
use crate::knowledge::{FailureSignal, KnowledgePacket, KnowledgeStore, RepoEntry};

use super::{update_episodic, EpisodicLesson, EpisodicStore, LessonExtractor, MemoryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerAction {
    Retry,
    Pivot,
    Complete,
}

impl ControllerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerAction::Retry => "RETRY",
            ControllerAction::Pivot => "PIVOT",
            ControllerAction::Complete => "COMPLETE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub goal: String,
    pub packet: KnowledgePacket,
    pub last_experiment: Option<ExperimentRecord>,
    pub retrieved_lessons: Vec<EpisodicLesson>,
    pub consecutive_failures: u32,
    pub beta: f64,
    /// The evaluator's stopping rule.
    pub should_stop: bool,
    /// The last experiment met the declared goal threshold.
    pub goal_met: bool,
}

pub trait DecisionPolicy: Send + Sync {
    fn decide(&self, state: &ControllerState) -> ControllerAction;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefaultPolicy {
    pub f_max: u32,
}

impl Default for DefaultPolicy {
    fn default() -> Self {
        Self { f_max: 3 }
    }
}

impl DecisionPolicy for DefaultPolicy {
    fn decide(&self, state: &ControllerState) -> ControllerAction {
        decide_action(state, self.f_max)
    }
}

/// COMPLETE on stop or goal, PIVOT after `f_max` consecutive failures,
/// RETRY otherwise.
pub fn decide_action(state: &ControllerState, f_max: u32) -> ControllerAction {
    if state.should_stop || state.goal_met {
        ControllerAction::Complete
    } else if state.consecutive_failures >= f_max {
        ControllerAction::Pivot
    } else {
        ControllerAction::Retry
    }
}

/// Re-select a seed with `excluded` removed from the candidates and
/// retrieve a fresh packet. Falls back to no seed when nothing clears τ.
pub fn pivot_retrieval(knowledge: &KnowledgeStore, goal: &str, excluded: Option<&RepoEntry>) -> KnowledgePacket {
    let exclude: Vec<String> = excluded.map(|e| vec![e.repo_id.clone()]).unwrap_or_default();
    let (decision, _) = knowledge.select_seed(goal, &exclude);
    let seed = decision.seed_ref();
    knowledge.retrieve_knowledge(goal, seed.as_ref(), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub f_max: u32,
    pub top_m: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { f_max: 3, top_m: super::DEFAULT_TOP_M }
    }
}

pub struct StepInput<'a> {
    pub goal: &'a str,
    pub run_id: &'a str,
    /// Every experiment of the iteration, in execution order.
    pub experiments: &'a [ExperimentRecord],
    /// The experiment the decision is about (best of the batch).
    pub focus: &'a ExperimentRecord,
    pub packet: &'a KnowledgePacket,
    pub beta: f64,
    pub should_stop: bool,
    pub goal_met: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub action: ControllerAction,
    pub packet: KnowledgePacket,
    pub lessons: Vec<EpisodicLesson>,
    pub new_lessons: Vec<EpisodicLesson>,
    pub consecutive_failures: u32,
}

pub struct Controller {
    pub config: ControllerConfig,
    policy: Box<dyn DecisionPolicy>,
    consecutive_failures: u32,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("config", &self.config)
            .field("consecutive_failures", &self.consecutive_failures)
            .finish()
    }
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Self { config, policy: Box::new(DefaultPolicy { f_max: config.f_max }), consecutive_failures: 0 }
    }

    pub fn with_policy(mut self, policy: Box<dyn DecisionPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures
    }

    /// Count one experiment toward the failure streak.
    pub fn observe(&mut self, experiment: &ExperimentRecord) {
        if experiment.is_feasible() {
            self.consecutive_failures = 0;
        } else {
            self.consecutive_failures += 1;
        }
    }

    /// Update memory with the iteration's experiments, retrieve lessons,
    /// refresh the packet (with recovery after a failure), then decide.
    pub fn step(
        &mut self,
        input: &StepInput<'_>,
        knowledge: &KnowledgeStore,
        episodic: &mut EpisodicStore,
        extractor: &dyn LessonExtractor,
    ) -> Result<StepOutcome, MemoryError> {
        let mut new_lessons = Vec::new();
        for e in input.experiments {
            new_lessons.extend(update_episodic(episodic, input.goal, e, input.run_id, extractor)?);
            self.observe(e);
        }
        episodic.top_m = self.config.top_m;
        let lessons = episodic.retrieve(input.goal, Some(input.focus));

        let seed = input.packet.seed_repo.clone();
        let mut packet = match FailureSignal::from_record(&input.focus.aggregated.record, &input.focus.branch) {
            Some(signal) => knowledge.retrieve_knowledge(input.goal, seed.as_ref(), Some(&signal)),
            None => input.packet.clone(),
        };

        let state = ControllerState {
            goal: input.goal.to_string(),
            packet: packet.clone(),
            last_experiment: Some(input.focus.clone()),
            retrieved_lessons: lessons.clone(),
            consecutive_failures: self.consecutive_failures,
            beta: input.beta,
            should_stop: input.should_stop,
            goal_met: input.goal_met,
        };
        let action = self.policy.decide(&state);
        if action == ControllerAction::Pivot {
            packet = pivot_retrieval(knowledge, input.goal, seed.as_ref().map(|s| &s.entry));
            self.consecutive_failures = 0;
        }
        Ok(StepOutcome { action, packet, lessons, new_lessons, consecutive_failures: self.consecutive_failures })
    }
}
