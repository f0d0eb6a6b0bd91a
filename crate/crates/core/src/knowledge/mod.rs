//! Repository corpus, typed knowledge graph, and packet retrieval.
//!
//! Pages come in four types and are linked by typed edges. A
//! [`KnowledgeStore`] keeps them in a vector index (content embeddings) and a
//! graph index (adjacency), alongside the repository corpus used for seed
//! selection. Retrieval produces a bounded [`KnowledgePacket`] that records
//! where every page came from.

mod ingest;
mod package;
mod retrieval;
mod store;

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{MeasurementRecord, Status};

pub use ingest::{ingest_repo, IngestOptions, PrincipleExtractor, TriageRules};
pub use package::{export_package, import_package, PackageManifest, PACKAGE_FORMAT_VERSION};
pub use retrieval::{select_init, InitDecision, RetrievalConfig};
pub use store::{GraphIndex, IndexStats, InMemoryGraphIndex, InMemoryVectorIndex, KnowledgeStore, VectorIndex};

pub const EXCERPT_MAX_CHARS: usize = 500;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no commit identifier resolvable for {0}")]
    NoCommit(PathBuf),
    #[error("edge from {source_id} points to unknown id {target_id}")]
    DanglingEdge { source_id: String, target_id: String },
    #[error("edge {edge_type:?} from {source_id} targets {target_id}, which is not a {expected:?} page")]
    EdgeTypeViolation { source_id: String, edge_type: EdgeType, target_id: String, expected: PageType },
    #[error("invalid page: {0}")]
    InvalidPage(String),
    #[error("package format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("invalid knowledge package: {0}")]
    InvalidPackage(String),
    #[error("failure excerpt must not be empty")]
    EmptyExcerpt,
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl KnowledgeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        KnowledgeError::Io { path: path.into(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageType {
    Principle,
    Implementation,
    Environment,
    Heuristic,
}

impl PageType {
    pub const ALL: [PageType; 4] =
        [PageType::Principle, PageType::Implementation, PageType::Environment, PageType::Heuristic];

    pub fn as_str(self) -> &'static str {
        match self {
            PageType::Principle => "Principle",
            PageType::Implementation => "Implementation",
            PageType::Environment => "Environment",
            PageType::Heuristic => "Heuristic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeType {
    ImplementedBy,
    UsesHeuristic,
    RequiresEnv,
    CrossRef,
    /// Target is a repository id rather than a page id.
    RelatedRepo,
}

impl EdgeType {
    /// The page type an edge of this kind must point at, if constrained.
    pub fn required_target(self) -> Option<PageType> {
        match self {
            EdgeType::ImplementedBy => Some(PageType::Implementation),
            EdgeType::UsesHeuristic => Some(PageType::Heuristic),
            EdgeType::RequiresEnv => Some(PageType::Environment),
            EdgeType::CrossRef | EdgeType::RelatedRepo => None,
        }
    }

    pub fn targets_repo(self) -> bool {
        self == EdgeType::RelatedRepo
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypedEdge {
    pub edge_type: EdgeType,
    pub target_id: String,
}

impl TypedEdge {
    pub fn new(edge_type: EdgeType, target_id: impl Into<String>) -> Self {
        Self { edge_type, target_id: target_id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePage {
    pub id: String,
    pub title: String,
    pub page_type: PageType,
    pub content: String,
    #[serde(default)]
    pub code_snippets: Vec<String>,
    #[serde(default)]
    pub source_repo: Option<String>,
    #[serde(default)]
    pub edges: Vec<TypedEdge>,
}

impl KnowledgePage {
    pub fn new(id: impl Into<String>, page_type: PageType, title: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            page_type,
            content: content.into(),
            code_snippets: Vec::new(),
            source_repo: None,
            edges: Vec::new(),
        }
    }

    pub fn with_source(mut self, repo_id: impl Into<String>) -> Self {
        self.source_repo = Some(repo_id.into());
        self
    }

    pub fn with_edge(mut self, edge_type: EdgeType, target: impl Into<String>) -> Self {
        self.edges.push(TypedEdge::new(edge_type, target));
        self
    }

    /// Text that gets embedded for similarity search.
    pub fn embedding_text(&self) -> String {
        let mut text = format!("{}\n{}", self.title, self.content);
        for snippet in &self.code_snippets {
            text.push('\n');
            text.push_str(snippet);
        }
        text
    }

    /// True when the page is tied to `repo_id` by provenance or a
    /// RELATED_REPO link.
    pub fn linked_to_repo(&self, repo_id: &str) -> bool {
        self.source_repo.as_deref() == Some(repo_id)
            || self.edges.iter().any(|e| e.edge_type == EdgeType::RelatedRepo && e.target_id == repo_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub repo_id: String,
    /// URL or filesystem path the snapshot came from.
    pub location: String,
    pub commit_id: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRef {
    pub entry: RepoEntry,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Error,
    ContractViolation,
    Qualitative,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Error => "error",
            FailureKind::ContractViolation => "contract_violation",
            FailureKind::Qualitative => "qualitative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSignal {
    pub kind: FailureKind,
    pub excerpt: String,
    pub origin_branch: String,
}

impl FailureSignal {
    /// Excerpts longer than [`EXCERPT_MAX_CHARS`] keep their tail, where
    /// tracebacks usually end.
    pub fn new(kind: FailureKind, excerpt: &str, origin_branch: impl Into<String>) -> Result<Self, KnowledgeError> {
        let trimmed = excerpt.trim();
        if trimmed.is_empty() {
            return Err(KnowledgeError::EmptyExcerpt);
        }
        let count = trimmed.chars().count();
        let excerpt = if count > EXCERPT_MAX_CHARS {
            trimmed.chars().skip(count - EXCERPT_MAX_CHARS).collect()
        } else {
            trimmed.to_string()
        };
        Ok(Self { kind, excerpt, origin_branch: origin_branch.into() })
    }

    /// Signal for an infeasible record; `None` for feasible ones.
    pub fn from_record(record: &MeasurementRecord, origin_branch: &str) -> Option<Self> {
        let kind = match record.status {
            Status::Success => return None,
            Status::Error => FailureKind::Error,
            Status::ContractViolation => FailureKind::ContractViolation,
        };
        let excerpt = if record.feedback.trim().is_empty() { record.status.as_str() } else { &record.feedback };
        Self::new(kind, excerpt, origin_branch).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub failure_kind: FailureKind,
    pub attached: Vec<String>,
    pub query_used: String,
    pub origin_branch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KnowledgePacket {
    pub seed_repo: Option<SeedRef>,
    pub pages_by_type: BTreeMap<PageType, Vec<KnowledgePage>>,
    pub confidences: BTreeMap<String, f64>,
    pub query_used: String,
    pub source_pages: Vec<String>,
    pub recovery: Option<Recovery>,
}

impl KnowledgePacket {
    pub fn page_count(&self) -> usize {
        self.pages_by_type.values().map(Vec::len).sum()
    }

    pub fn pages(&self) -> impl Iterator<Item = &KnowledgePage> {
        self.pages_by_type.values().flatten()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.pages().any(|p| p.id == id)
    }

    pub fn page_ids(&self) -> Vec<String> {
        self.pages().map(|p| p.id.clone()).collect()
    }
}
