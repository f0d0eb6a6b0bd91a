//! The coding-agent boundary.
//!
//! A [`CodingAgent`] turns a solution specification into file edits inside a
//! session working tree. Agents only edit files; execution is the
//! evaluator's job. Every edit goes through [`apply_file_operations`], which
//! validates the whole operation set before touching disk and refuses paths
//! that leave the tree.

mod context;
mod files;
mod http;
mod scripted;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::evaluator::MeasurementRecord;
use crate::search::SolutionSpec;

pub use context::{render_context, ContextDocument, ContextParts, HistoryLine, DEFAULT_CONTEXT_BUDGET, TRUNCATION_MARKER};
pub use files::{apply_file_operations, extract_json_object, FileOperations};
pub use http::{ChatClient, ChatMessage, HttpAgent, HttpAgentConfig};
pub use scripted::{ScriptedAgent, ScriptedPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Implement,
    Debug,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub mode: EditMode,
    pub spec: SolutionSpec,
    pub context: ContextDocument,
    /// Present exactly in debug mode.
    pub failing_record: Option<MeasurementRecord>,
    pub worktree: PathBuf,
}

impl EditRequest {
    pub fn implement(spec: SolutionSpec, context: ContextDocument, worktree: PathBuf) -> Self {
        Self { mode: EditMode::Implement, spec, context, failing_record: None, worktree }
    }

    pub fn debug(spec: SolutionSpec, context: ContextDocument, failing: MeasurementRecord, worktree: PathBuf) -> Self {
        Self { mode: EditMode::Debug, spec, context, failing_record: Some(failing), worktree }
    }

    /// Debug mode requires a failing record.
    pub fn is_well_formed(&self) -> bool {
        match self.mode {
            EditMode::Implement => true,
            EditMode::Debug => self.failing_record.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    /// Relative paths actually created, modified, or deleted.
    pub changed_paths: Vec<String>,
    pub transcript: String,
    pub ok: bool,
    pub diagnostic: Option<String>,
    /// Spend attributable to this call, in budget currency units.
    #[serde(default)]
    pub cost: f64,
}

impl EditResult {
    pub fn applied(changed_paths: Vec<String>, transcript: String) -> Self {
        Self { changed_paths, transcript, ok: true, diagnostic: None, cost: 0.0 }
    }

    pub fn failed(diagnostic: impl Into<String>, transcript: String) -> Self {
        let mut diagnostic = diagnostic.into();
        if diagnostic.trim().is_empty() {
            diagnostic = "agent failed without diagnostic".into();
        }
        Self { changed_paths: Vec::new(), transcript, ok: false, diagnostic: Some(diagnostic), cost: 0.0 }
    }
}

/// Applies implementation and debug edits to a working tree.
///
/// Implementations are stateless per request and may serve concurrent
/// requests against distinct worktrees.
pub trait CodingAgent: Send + Sync {
    fn name(&self) -> &str;

    fn apply_edits(&self, request: &EditRequest) -> EditResult;
}
