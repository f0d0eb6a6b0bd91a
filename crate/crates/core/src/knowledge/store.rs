//! Index backends and the store that owns them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, HashedBagOfWords};

use super::{EdgeType, KnowledgeError, KnowledgePage, RepoEntry, RetrievalConfig, TypedEdge};

/// Similarity search over page embeddings.
pub trait VectorIndex: Send + Sync {
    fn upsert(&mut self, id: &str, vector: Vec<f64>);
    fn remove(&mut self, id: &str);
    /// Similarity of `query` to every indexed id, in id order.
    fn similarities(&self, query: &[f64]) -> Vec<(String, f64)>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Typed adjacency between pages.
pub trait GraphIndex: Send + Sync {
    fn set_node(&mut self, id: &str, edges: &[TypedEdge]);
    fn remove_node(&mut self, id: &str);
    fn neighbors(&self, id: &str) -> Vec<TypedEdge>;
    fn node_count(&self) -> usize;
    fn edge_count(&self) -> usize;
}

/// Exact cosine similarity over a map of vectors.
#[derive(Debug, Default, Clone)]
pub struct InMemoryVectorIndex {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl VectorIndex for InMemoryVectorIndex {
    fn upsert(&mut self, id: &str, vector: Vec<f64>) {
        self.vectors.insert(id.to_string(), vector);
    }

    fn remove(&mut self, id: &str) {
        self.vectors.remove(id);
    }

    fn similarities(&self, query: &[f64]) -> Vec<(String, f64)> {
        self.vectors.iter().map(|(id, v)| (id.clone(), cosine(query, v))).collect()
    }

    fn len(&self) -> usize {
        self.vectors.len()
    }
}

#[derive(Debug, Default, Clone)]
pub struct InMemoryGraphIndex {
    adjacency: BTreeMap<String, Vec<TypedEdge>>,
}

impl GraphIndex for InMemoryGraphIndex {
    fn set_node(&mut self, id: &str, edges: &[TypedEdge]) {
        let mut edges = edges.to_vec();
        edges.sort();
        edges.dedup();
        self.adjacency.insert(id.to_string(), edges);
    }

    fn remove_node(&mut self, id: &str) {
        self.adjacency.remove(id);
    }

    fn neighbors(&self, id: &str) -> Vec<TypedEdge> {
        self.adjacency.get(id).cloned().unwrap_or_default()
    }

    fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub nodes: usize,
    pub edges: usize,
}

/// Pages, repositories, and their indices.
///
/// Retrieval takes `&self` and may run concurrently; ingestion and indexing
/// take `&mut self`. Share across threads behind an `RwLock`.
pub struct KnowledgeStore {
    pub config: RetrievalConfig,
    pub(crate) embedder: Arc<dyn Embedder>,
    pub(crate) pages: BTreeMap<String, KnowledgePage>,
    pub(crate) repos: BTreeMap<String, RepoEntry>,
    pub(crate) vectors: Box<dyn VectorIndex>,
    pub(crate) graph: Box<dyn GraphIndex>,
}

impl fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeStore")
            .field("pages", &self.pages.len())
            .field("repos", &self.repos.len())
            .field("config", &self.config)
            .finish()
    }
}

impl Default for KnowledgeStore {
    fn default() -> Self {
        Self::new(RetrievalConfig::default())
    }
}

impl KnowledgeStore {
    pub fn new(config: RetrievalConfig) -> Self {
        Self::with_backends(
            config,
            Arc::new(HashedBagOfWords::default()),
            Box::new(InMemoryVectorIndex::default()),
            Box::new(InMemoryGraphIndex::default()),
        )
    }

    pub fn with_backends(
        config: RetrievalConfig,
        embedder: Arc<dyn Embedder>,
        vectors: Box<dyn VectorIndex>,
        graph: Box<dyn GraphIndex>,
    ) -> Self {
        Self { config, embedder, pages: BTreeMap::new(), repos: BTreeMap::new(), vectors, graph }
    }

    pub fn page(&self, id: &str) -> Option<&KnowledgePage> {
        self.pages.get(id)
    }

    pub fn pages(&self) -> impl Iterator<Item = &KnowledgePage> {
        self.pages.values()
    }

    pub fn repos(&self) -> impl Iterator<Item = &RepoEntry> {
        self.repos.values()
    }

    pub fn repo(&self, id: &str) -> Option<&RepoEntry> {
        self.repos.get(id)
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn repo_count(&self) -> usize {
        self.repos.len()
    }

    pub fn edge_count(&self) -> usize {
        self.pages.values().map(|p| p.edges.len()).sum()
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats { nodes: self.graph.node_count(), edges: self.graph.edge_count() }
    }

    pub(crate) fn embed(&self, text: &str) -> Vec<f64> {
        self.embedder.embed(text)
    }

    /// Add or replace a repository entry. The entry's embedding is filled
    /// from its summary when absent.
    pub fn add_repo(&mut self, mut entry: RepoEntry) -> Result<(), KnowledgeError> {
        if entry.repo_id.is_empty() {
            return Err(KnowledgeError::InvalidPage("repo_id is empty".into()));
        }
        if entry.commit_id.is_empty() {
            return Err(KnowledgeError::InvalidPage(format!("repo {} has no commit id", entry.repo_id)));
        }
        if entry.embedding.is_none() {
            entry.embedding = Some(self.embed(&entry.summary));
        }
        self.repos.insert(entry.repo_id.clone(), entry);
        Ok(())
    }

    /// Insert pages into both indices. Ids already present are replaced.
    /// The batch is checked as a whole before anything is written.
    pub fn index_pages(&mut self, pages: Vec<KnowledgePage>) -> Result<IndexStats, KnowledgeError> {
        let mut batch: BTreeMap<String, KnowledgePage> = BTreeMap::new();
        for page in pages {
            if page.id.is_empty() {
                return Err(KnowledgeError::InvalidPage("page id is empty".into()));
            }
            batch.insert(page.id.clone(), page);
        }
        let type_of = |id: &str| batch.get(id).or_else(|| self.pages.get(id)).map(|p| p.page_type);
        for page in batch.values() {
            for edge in &page.edges {
                if edge.edge_type.targets_repo() {
                    if !self.repos.contains_key(&edge.target_id) {
                        return Err(KnowledgeError::DanglingEdge {
                            source_id: page.id.clone(),
                            target_id: edge.target_id.clone(),
                        });
                    }
                    continue;
                }
                let Some(target_type) = type_of(&edge.target_id) else {
                    return Err(KnowledgeError::DanglingEdge {
                        source_id: page.id.clone(),
                        target_id: edge.target_id.clone(),
                    });
                };
                if let Some(expected) = edge.edge_type.required_target() {
                    if target_type != expected {
                        return Err(KnowledgeError::EdgeTypeViolation {
                            source_id: page.id.clone(),
                            edge_type: edge.edge_type,
                            target_id: edge.target_id.clone(),
                            expected,
                        });
                    }
                }
            }
        }
        for (id, page) in batch {
            self.vectors.upsert(&id, self.embedder.embed(&page.embedding_text()));
            self.graph.set_node(&id, &page.edges);
            self.pages.insert(id, page);
        }
        Ok(self.stats())
    }

    /// Remove a page. Fails if another page still points at it.
    pub fn remove_page(&mut self, id: &str) -> Result<(), KnowledgeError> {
        if let Some(referrer) = self
            .pages
            .values()
            .find(|p| p.id != id && p.edges.iter().any(|e| !e.edge_type.targets_repo() && e.target_id == id))
        {
            return Err(KnowledgeError::InvalidPage(format!("{} is still referenced by {}", id, referrer.id)));
        }
        self.pages.remove(id);
        self.vectors.remove(id);
        self.graph.remove_node(id);
        Ok(())
    }

    /// All outgoing page-to-page edges as (source, edge) pairs, sorted.
    pub fn edges(&self) -> Vec<(String, TypedEdge)> {
        let mut out: Vec<(String, TypedEdge)> = self
            .pages
            .values()
            .flat_map(|p| p.edges.iter().map(move |e| (p.id.clone(), e.clone())))
            .collect();
        out.sort();
        out
    }

    pub(crate) fn page_neighbors(&self, id: &str) -> Vec<String> {
        let mut ids: BTreeSet<String> = BTreeSet::new();
        for edge in self.graph.neighbors(id) {
            if edge.edge_type != EdgeType::RelatedRepo && self.pages.contains_key(&edge.target_id) {
                ids.insert(edge.target_id);
            }
        }
        ids.into_iter().collect()
    }
}
