//! Rendering of the context document shared by proposal and implementation.
//!
//! Sections are always emitted in the same order: problem, knowledge,
//! episodic lessons, experiment history. When the total would exceed the
//! character budget, the oversized sections are cut (largest first, by
//! water-filling) and end with [`TRUNCATION_MARKER`]; small sections stay
//! intact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluator::{SelectionRule, Status};
use crate::experiment::ExperimentRecord;
use crate::knowledge::{KnowledgePacket, PageType};
use crate::memory::EpisodicLesson;

pub const DEFAULT_CONTEXT_BUDGET: usize = 16_000;
pub const TRUNCATION_MARKER: &str = "\n[... section truncated ...]\n";

const SECTION_TITLES: [&str; 4] = ["Problem", "Knowledge", "Episodic lessons", "Experiment history"];
const PAGE_EXCERPT_CHARS: usize = 400;

/// Text plus structured constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ContextDocument {
    pub text: String,
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
}

impl ContextDocument {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), constraints: BTreeMap::new() }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// One history entry as shown to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub branch: String,
    pub status: Status,
    pub headline: Option<(String, f64)>,
}

impl HistoryLine {
    pub fn from_record(record: &ExperimentRecord, rule: &SelectionRule) -> Self {
        let agg = &record.aggregated.record;
        let headline = rule
            .headline_metric()
            .and_then(|m| agg.metric(m).map(|v| (m.to_string(), v)))
            .or_else(|| agg.metrics.iter().next().map(|(k, v)| (k.clone(), *v)));
        Self { branch: record.branch.clone(), status: agg.status, headline }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ContextParts<'a> {
    pub problem: Option<&'a ContextDocument>,
    pub packet: Option<&'a KnowledgePacket>,
    pub lessons: &'a [EpisodicLesson],
    pub history: &'a [HistoryLine],
}

fn one_line(text: &str, max_chars: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max_chars {
        flat
    } else {
        let mut cut: String = flat.chars().take(max_chars).collect();
        cut.push_str(" ...");
        cut
    }
}

fn problem_body(problem: Option<&ContextDocument>) -> String {
    let Some(doc) = problem else { return String::new() };
    let mut out = String::new();
    if !doc.text.is_empty() {
        out.push_str(doc.text.trim_end());
        out.push('\n');
    }
    if !doc.constraints.is_empty() {
        out.push_str("Constraints:\n");
        for (k, v) in &doc.constraints {
            out.push_str(&format!("- {k}: {v}\n"));
        }
    }
    out
}

fn knowledge_body(packet: Option<&KnowledgePacket>) -> String {
    let Some(packet) = packet else { return String::new() };
    if packet.page_count() == 0 && packet.seed_repo.is_none() && packet.recovery.is_none() {
        return String::new();
    }
    let mut out = format!("query: {}\n", packet.query_used);
    match &packet.seed_repo {
        Some(seed) => out.push_str(&format!(
            "seed repository: {} @ {} (confidence {:.3})\n",
            seed.entry.repo_id, seed.entry.commit_id, seed.confidence
        )),
        None => out.push_str("seed repository: none (scaffold)\n"),
    }
    for page_type in PageType::ALL {
        let Some(pages) = packet.pages_by_type.get(&page_type) else { continue };
        if pages.is_empty() {
            continue;
        }
        out.push_str(&format!("## {}\n", page_type.as_str()));
        for page in pages {
            let confidence = packet.confidences.get(&page.id).copied().unwrap_or(0.0);
            let source = page.source_repo.as_deref().unwrap_or("curated");
            out.push_str(&format!(
                "- {} | {} [confidence {:.3}; source {}]\n",
                page.id, page.title, confidence, source
            ));
            if !page.content.trim().is_empty() {
                out.push_str(&format!("  {}\n", one_line(&page.content, PAGE_EXCERPT_CHARS)));
            }
        }
    }
    if let Some(recovery) = &packet.recovery {
        out.push_str(&format!(
            "recovery for {} (from {}): {}\n",
            recovery.failure_kind.as_str(),
            recovery.origin_branch,
            recovery.attached.join(", ")
        ));
    }
    out
}

fn lessons_body(lessons: &[EpisodicLesson]) -> String {
    let mut out = String::new();
    for l in lessons {
        out.push_str(&format!(
            "- [{}] when: {} | lesson: {} (from {})\n",
            l.kind.as_str(),
            one_line(&l.trigger, 200),
            one_line(&l.lesson, 400),
            l.provenance.branch
        ));
        if !l.recommended_actions.is_empty() {
            out.push_str(&format!("  actions: {}\n", l.recommended_actions.join("; ")));
        }
    }
    out
}

fn history_body(history: &[HistoryLine]) -> String {
    let mut out = String::new();
    for h in history {
        match &h.headline {
            Some((name, value)) => out.push_str(&format!("- {}: {} {}={}\n", h.branch, h.status.as_str(), name, value)),
            None => out.push_str(&format!("- {}: {}\n", h.branch, h.status.as_str())),
        }
    }
    out
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Per-section allocations that fit `available` chars: sections no larger
/// than the running fair share keep their full length.
fn water_fill(lengths: &[usize], available: usize) -> Vec<usize> {
    let mut alloc = vec![0usize; lengths.len()];
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut remaining = available;
    let mut left = lengths.len();
    for i in order {
        let share = remaining / left;
        alloc[i] = lengths[i].min(share);
        remaining -= alloc[i];
        left -= 1;
    }
    alloc
}

/// Render the parts into one bounded, deterministic document.
pub fn render_context(parts: &ContextParts<'_>, budget_chars: usize) -> ContextDocument {
    let bodies = [
        problem_body(parts.problem),
        knowledge_body(parts.packet),
        lessons_body(parts.lessons),
        history_body(parts.history),
    ];
    let headers: Vec<String> = SECTION_TITLES.iter().map(|t| format!("# {t}\n")).collect();
    // sections are separated by one blank line
    let fixed: usize = headers.iter().map(|h| h.chars().count()).sum::<usize>() + headers.len() - 1;
    let lengths: Vec<usize> = bodies.iter().map(|b| b.chars().count()).collect();

    let fitted: Vec<String> = if lengths.iter().sum::<usize>() + fixed <= budget_chars {
        bodies.to_vec()
    } else {
        let alloc = water_fill(&lengths, budget_chars.saturating_sub(fixed));
        let marker_len = TRUNCATION_MARKER.chars().count();
        bodies
            .iter()
            .zip(lengths.iter().zip(&alloc))
            .map(|(body, (&len, &a))| {
                if len <= a {
                    body.clone()
                } else if a >= marker_len {
                    format!("{}{}", take_chars(body, a - marker_len), TRUNCATION_MARKER)
                } else {
                    take_chars(TRUNCATION_MARKER.trim_start(), a).to_string()
                }
            })
            .collect()
    };

    let mut text = headers
        .iter()
        .zip(&fitted)
        .map(|(h, b)| format!("{h}{b}"))
        .collect::<Vec<_>>()
        .join("\n");
    if text.chars().count() > budget_chars {
        text = take_chars(&text, budget_chars).to_string();
    }
    let constraints = parts.problem.map(|p| p.constraints.clone()).unwrap_or_default();
    ContextDocument { text, constraints }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn history(n: usize) -> Vec<HistoryLine> {
        (0..n)
            .map(|i| HistoryLine {
                branch: format!("kapso/r1/exp-{i}"),
                status: if i % 2 == 0 { Status::Success } else { Status::Error },
                headline: (i % 2 == 0).then(|| ("score".to_string(), -(i as f64))),
            })
            .collect()
    }

    #[test]
    fn empty_parts_render_only_headers() {
        let doc = render_context(&ContextParts::default(), DEFAULT_CONTEXT_BUDGET);
        assert_eq!(doc.text, "# Problem\n\n# Knowledge\n\n# Episodic lessons\n\n# Experiment history\n");
    }

    #[test]
    fn rendering_is_deterministic_and_ordered() {
        let problem = ContextDocument::new("Maximize the score.");
        let h = history(2);
        let parts = ContextParts { problem: Some(&problem), history: &h, ..Default::default() };
        let a = render_context(&parts, DEFAULT_CONTEXT_BUDGET);
        let b = render_context(&parts, DEFAULT_CONTEXT_BUDGET);
        assert_eq!(a, b);
        let p = a.text.find("Maximize").unwrap();
        let e = a.text.find("kapso/r1/exp-0: success score=-0").unwrap();
        assert!(p < e);
        assert!(a.text.contains("kapso/r1/exp-1: error"));
    }

    #[test]
    fn oversized_section_is_truncated_with_marker() {
        let problem = ContextDocument::new("short problem");
        let h = history(400);
        let parts = ContextParts { problem: Some(&problem), history: &h, ..Default::default() };
        let doc = render_context(&parts, 1_000);
        assert!(doc.char_len() <= 1_000);
        assert!(doc.text.contains("short problem"));
        assert!(doc.text.ends_with(TRUNCATION_MARKER));
    }

    #[test]
    fn water_fill_keeps_small_sections() {
        assert_eq!(water_fill(&[10, 500, 20, 0], 130), vec![10, 100, 20, 0]);
        assert_eq!(water_fill(&[10, 20], 100), vec![10, 20]);
    }

    proptest! {
        #[test]
        fn never_exceeds_budget(text in "\\PC{0,400}", n in 0usize..60, budget in 0usize..3000) {
            let problem = ContextDocument::new(text);
            let h = history(n);
            let parts = ContextParts { problem: Some(&problem), history: &h, ..Default::default() };
            let doc = render_context(&parts, budget);
            prop_assert!(doc.char_len() <= budget);
            prop_assert_eq!(doc.clone(), render_context(&parts, budget));
        }
    }
}
