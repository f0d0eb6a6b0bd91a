//! Seed selection and packet assembly.
//!
//! Scoring (version `hbow-v1`):
//!
//! - repository score: `min(1, max(0, cos(goal, summary)) + tag_bonus)`,
//!   where the bonus applies when any repository tag is a goal token;
//! - page score: `max(0, cos(query, page)) + seed_bonus` for pages tied to the
//!   seed repository, only for pages with positive similarity;
//! - one-hop neighbours inherit `expansion_decay * parent_score`.
//!
//! Pages are admitted greedily by descending score (ties by id) under the
//! total and per-type bounds. Confidences are scores clamped to `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, token_set};

use super::{
    FailureSignal, KnowledgePacket, KnowledgeStore, PageType, Recovery, RepoEntry, SeedRef,
};

pub const SCORING_VERSION: &str = "hbow-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub scoring_version: String,
    /// Seed threshold τ.
    pub tau: f64,
    pub max_pages: usize,
    pub max_per_type: usize,
    pub seed_bonus: f64,
    pub tag_bonus: f64,
    pub expansion_decay: f64,
    pub max_recovery_pages: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            scoring_version: SCORING_VERSION.to_string(),
            tau: 0.7,
            max_pages: 12,
            max_per_type: 4,
            seed_bonus: 0.1,
            tag_bonus: 0.2,
            expansion_decay: 0.5,
            max_recovery_pages: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDecision {
    Seed { entry: RepoEntry, confidence: f64 },
    Scaffold,
}

impl InitDecision {
    pub fn seed_ref(&self) -> Option<SeedRef> {
        match self {
            InitDecision::Seed { entry, confidence } => Some(SeedRef { entry: entry.clone(), confidence: *confidence }),
            InitDecision::Scaffold => None,
        }
    }

    pub fn is_seed(&self) -> bool {
        matches!(self, InitDecision::Seed { .. })
    }
}

/// Seed iff a candidate exists and `rho >= tau`.
pub fn select_init(candidate: Option<&RepoEntry>, rho: f64, tau: f64) -> InitDecision {
    match candidate {
        Some(entry) if rho >= tau => InitDecision::Seed { entry: entry.clone(), confidence: rho },
        _ => InitDecision::Scaffold,
    }
}

fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn query_text(goal: &str) -> String {
    let trimmed = goal.trim();
    if trimmed.is_empty() {
        "(empty goal)".to_string()
    } else {
        trimmed.to_string()
    }
}

impl KnowledgeStore {
    /// Best repository for `goal`, skipping `exclude`. Empty corpus → `(None, 0)`.
    pub fn repo_retrieve(&self, goal: &str, exclude: &[String]) -> (Option<RepoEntry>, f64) {
        let q = self.embed(goal);
        let goal_tokens = token_set(goal);
        let mut scored: Vec<(String, f64)> = self
            .repos
            .values()
            .filter(|r| !exclude.contains(&r.repo_id))
            .map(|r| {
                let sim = match &r.embedding {
                    Some(v) => cosine(&q, v),
                    None => cosine(&q, &self.embed(&r.summary)),
                };
                let tagged = r.tags.iter().any(|t| goal_tokens.contains(&t.to_lowercase()));
                let bonus = if tagged { self.config.tag_bonus } else { 0.0 };
                (r.repo_id.clone(), (sim.max(0.0) + bonus).min(1.0))
            })
            .collect();
        scored.sort_by(by_score_then_id);
        match scored.first() {
            Some((id, score)) => (self.repos.get(id).cloned(), *score),
            None => (None, 0.0),
        }
    }

    fn page_scores(&self, query: &str, seed: Option<&RepoEntry>) -> BTreeMap<String, f64> {
        let q = self.embed(query);
        let mut out = BTreeMap::new();
        for (id, sim) in self.vectors.similarities(&q) {
            if sim <= 0.0 {
                continue;
            }
            let Some(page) = self.pages.get(&id) else { continue };
            let bonus = match seed {
                Some(s) if page.linked_to_repo(&s.repo_id) => self.config.seed_bonus,
                _ => 0.0,
            };
            out.insert(id, sim + bonus);
        }
        out
    }

    /// Per-type top-n by similarity, one-hop expansion, then bounded
    /// greedy admission.
    pub fn retrieve_base(&self, goal: &str, seed: Option<&SeedRef>) -> KnowledgePacket {
        let query = query_text(goal);
        let scores = self.page_scores(&query, seed.map(|s| &s.entry));

        let mut primary: Vec<(String, f64)> = Vec::new();
        for page_type in PageType::ALL {
            let mut of_type: Vec<(String, f64)> = scores
                .iter()
                .filter(|(id, _)| self.pages[*id].page_type == page_type)
                .map(|(id, s)| (id.clone(), *s))
                .collect();
            of_type.sort_by(by_score_then_id);
            of_type.truncate(self.config.max_per_type);
            primary.extend(of_type);
        }

        let mut pool: BTreeMap<String, f64> = primary.iter().cloned().collect();
        for (id, score) in &primary {
            for neighbor in self.page_neighbors(id) {
                let inherited = score * self.config.expansion_decay;
                let entry = pool.entry(neighbor).or_insert(inherited);
                if inherited > *entry {
                    *entry = inherited;
                }
            }
        }
        let mut ranked: Vec<(String, f64)> = pool.into_iter().collect();
        ranked.sort_by(by_score_then_id);

        let mut packet = KnowledgePacket {
            seed_repo: seed.cloned(),
            query_used: query,
            ..KnowledgePacket::default()
        };
        for (id, score) in ranked {
            if packet.page_count() >= self.config.max_pages {
                break;
            }
            let page = &self.pages[&id];
            let bucket = packet.pages_by_type.entry(page.page_type).or_default();
            if bucket.len() >= self.config.max_per_type {
                continue;
            }
            bucket.push(page.clone());
            packet.confidences.insert(id.clone(), score.clamp(0.0, 1.0));
            packet.source_pages.push(id);
        }
        packet.pages_by_type.retain(|_, pages| !pages.is_empty());
        packet
    }

    /// Attach failure-conditioned Heuristic and alternative Implementation
    /// pages to `base`. Attachments may evict the lowest-confidence base
    /// pages to stay within bounds; they are never evicted themselves.
    pub fn augment_recovery(
        &self,
        goal: &str,
        signal: &FailureSignal,
        seed: Option<&SeedRef>,
        base: &KnowledgePacket,
    ) -> KnowledgePacket {
        let query = format!("{}\n{}", query_text(goal), signal.excerpt);
        let scores = self.page_scores(&query, seed.map(|s| &s.entry));
        let in_base: BTreeSet<String> = base.page_ids().into_iter().collect();
        let mut candidates: Vec<(String, f64)> = scores
            .into_iter()
            .filter(|(id, _)| {
                !in_base.contains(id)
                    && matches!(self.pages[id].page_type, PageType::Heuristic | PageType::Implementation)
            })
            .collect();
        candidates.sort_by(by_score_then_id);

        let mut packet = base.clone();
        let mut attached: Vec<String> = Vec::new();
        for (id, score) in candidates {
            if attached.len() >= self.config.max_recovery_pages {
                break;
            }
            let page = &self.pages[&id];
            let type_count = packet.pages_by_type.get(&page.page_type).map_or(0, Vec::len);
            if type_count >= self.config.max_per_type
                && !evict_lowest(&mut packet, Some(page.page_type), &attached)
            {
                continue;
            }
            if packet.page_count() >= self.config.max_pages && !evict_lowest(&mut packet, None, &attached) {
                break;
            }
            packet.pages_by_type.entry(page.page_type).or_default().push(page.clone());
            packet.confidences.insert(id.clone(), score.clamp(0.0, 1.0));
            packet.source_pages.push(id.clone());
            attached.push(id);
        }
        packet.pages_by_type.retain(|_, pages| !pages.is_empty());
        packet.query_used = query.clone();
        packet.recovery = Some(Recovery {
            failure_kind: signal.kind,
            attached,
            query_used: query,
            origin_branch: signal.origin_branch.clone(),
        });
        packet
    }

    /// Base retrieval, followed by recovery augmentation when a failure
    /// signal is present.
    pub fn retrieve_knowledge(
        &self,
        goal: &str,
        seed: Option<&SeedRef>,
        signal: Option<&FailureSignal>,
    ) -> KnowledgePacket {
        let base = self.retrieve_base(goal, seed);
        match signal {
            Some(s) => self.augment_recovery(goal, s, seed, &base),
            None => base,
        }
    }

    /// Seed candidate for `goal` and the resulting decision under τ.
    pub fn select_seed(&self, goal: &str, exclude: &[String]) -> (InitDecision, f64) {
        let (candidate, rho) = self.repo_retrieve(goal, exclude);
        (select_init(candidate.as_ref(), rho, self.config.tau), rho)
    }
}

/// Remove the lowest-confidence page not in `protected`, optionally
/// restricted to one type. Returns whether a page was removed.
fn evict_lowest(packet: &mut KnowledgePacket, page_type: Option<PageType>, protected: &[String]) -> bool {
    let victim = packet
        .pages()
        .filter(|p| page_type.is_none_or(|t| p.page_type == t) && !protected.contains(&p.id))
        .map(|p| (p.id.clone(), packet.confidences.get(&p.id).copied().unwrap_or(0.0)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
    let Some((id, _)) = victim else { return false };
    for pages in packet.pages_by_type.values_mut() {
        pages.retain(|p| p.id != id);
    }
    packet.confidences.remove(&id);
    packet.source_pages.retain(|p| *p != id);
    true
}
