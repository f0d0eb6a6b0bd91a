//! Deterministic mining of a repository snapshot into pages.
//!
//! Dependency manifests become one Environment page, entrypoint files become
//! Implementation pages that require it, and files matched by the triage
//! globs become Heuristic pages.

use std::fs;
use std::path::Path;
use std::process::Command;

use globset::{Glob, GlobSet, GlobSetBuilder};
use walkdir::WalkDir;

use crate::embedding::tokenize;

use super::{EdgeType, KnowledgeError, KnowledgePage, PageType, RepoEntry};

const CONTENT_MAX_CHARS: usize = 4000;
const SNIPPET_MAX_LINES: usize = 40;
const SNAPSHOT_COMMIT_FILE: &str = ".commit";

/// Glob rules that classify files. Paths are relative, `/`-separated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriageRules {
    pub manifests: Vec<String>,
    pub entrypoints: Vec<String>,
    pub heuristics: Vec<String>,
}

impl Default for TriageRules {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            manifests: own(&[
                "requirements*.txt",
                "pyproject.toml",
                "setup.py",
                "setup.cfg",
                "environment.yml",
                "environment.yaml",
                "Pipfile",
                "Cargo.toml",
                "package.json",
                "go.mod",
                "Dockerfile",
            ]),
            entrypoints: own(&["main.*", "**/main.*", "app.py", "run.sh", "**/__main__.py", "train.py", "solve.*"]),
            heuristics: own(&[
                "scripts/**",
                "configs/**",
                "config/**",
                "**/*.cfg",
                "**/*.ini",
                "**/*.yaml",
                "**/*.yml",
                "**/eval*",
                "**/*metric*",
                "**/*score*",
            ]),
        }
    }
}

fn compile(patterns: &[String]) -> Result<GlobSet, KnowledgeError> {
    let mut builder = GlobSetBuilder::new();
    for p in patterns {
        let glob = Glob::new(p).map_err(|e| KnowledgeError::InvalidPage(format!("bad glob {p:?}: {e}")))?;
        builder.add(glob);
    }
    builder.build().map_err(|e| KnowledgeError::InvalidPage(e.to_string()))
}

/// Optional pass that distills Principle pages, e.g. with a coding agent.
pub trait PrincipleExtractor {
    fn extract(&self, entry: &RepoEntry, pages: &[KnowledgePage]) -> Vec<KnowledgePage>;
}

#[derive(Default)]
pub struct IngestOptions<'a> {
    pub repo_id: Option<String>,
    pub tags: Vec<String>,
    pub summary: Option<String>,
    pub rules: TriageRules,
    /// Off unless set.
    pub principles: Option<&'a dyn PrincipleExtractor>,
}

fn resolve_commit(root: &Path) -> Result<String, KnowledgeError> {
    let out = Command::new("git")
        .current_dir(root)
        .args(["rev-parse", "--verify", "--quiet", "HEAD"])
        .env_remove("GIT_DIR")
        .output();
    if let Ok(out) = out {
        let id = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if out.status.success() && !id.is_empty() && root.join(".git").exists() {
            return Ok(id);
        }
    }
    match fs::read_to_string(root.join(SNAPSHOT_COMMIT_FILE)) {
        Ok(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        _ => Err(KnowledgeError::NoCommit(root.to_path_buf())),
    }
}

fn sanitize_id(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '-' })
        .collect();
    if s.is_empty() { "repo".to_string() } else { s }
}

fn read_text(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    let text = String::from_utf8(bytes).ok()?;
    Some(text)
}

fn bounded(text: &str, max: usize) -> String {
    text.chars().take(max).collect()
}

fn snippet(text: &str) -> String {
    text.lines().take(SNIPPET_MAX_LINES).collect::<Vec<_>>().join("\n")
}

fn readme_summary(root: &Path) -> Option<String> {
    for name in ["README.md", "README.rst", "README.txt", "README"] {
        if let Some(text) = read_text(&root.join(name)) {
            let para: Vec<&str> = text
                .lines()
                .map(|l| l.trim_start_matches('#').trim())
                .skip_while(|l| l.is_empty())
                .take_while(|l| !l.is_empty())
                .collect();
            if !para.is_empty() {
                return Some(para.join(" "));
            }
        }
    }
    None
}

/// Mine `root` into a repository entry and its pages. Page ids are
/// `<repo>:env`, `<repo>:impl:<path>`, and `<repo>:heur:<path>`.
pub fn ingest_repo(root: &Path, options: &IngestOptions<'_>) -> Result<(RepoEntry, Vec<KnowledgePage>), KnowledgeError> {
    if !root.is_dir() {
        return Err(KnowledgeError::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let commit_id = resolve_commit(root)?;
    let dir_name = root.canonicalize().ok().and_then(|p| p.file_name().map(|n| n.to_string_lossy().to_string()));
    let repo_id = options.repo_id.clone().unwrap_or_else(|| sanitize_id(dir_name.as_deref().unwrap_or("repo")));

    let manifests = compile(&options.rules.manifests)?;
    let entrypoints = compile(&options.rules.entrypoints)?;
    let heuristics = compile(&options.rules.heuristics)?;

    let mut files: Vec<String> = WalkDir::new(root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !matches!(e.file_name().to_str(), Some(".git" | ".kapso")))
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.path().strip_prefix(root).ok().map(|p| p.to_string_lossy().replace('\\', "/")))
        .filter(|p| p != SNAPSHOT_COMMIT_FILE)
        .collect();
    files.sort();

    let mut env_files = Vec::new();
    let mut impl_files = Vec::new();
    let mut heur_files = Vec::new();
    for f in &files {
        if manifests.is_match(f) {
            env_files.push(f.clone());
        } else if entrypoints.is_match(f) {
            impl_files.push(f.clone());
        } else if heuristics.is_match(f) {
            heur_files.push(f.clone());
        }
    }

    let mut tags: Vec<String> = options.tags.iter().map(|t| t.to_lowercase()).collect();
    for f in &env_files {
        let lang = match f.rsplit('/').next().unwrap_or(f) {
            n if n.starts_with("requirements") || n == "pyproject.toml" || n == "setup.py" || n == "Pipfile" => "python",
            "Cargo.toml" => "rust",
            "package.json" => "javascript",
            "go.mod" => "go",
            "Dockerfile" => "docker",
            _ => continue,
        };
        tags.push(lang.to_string());
    }
    tags.extend(tokenize(&repo_id).filter(|t| t.len() > 2));
    tags.sort();
    tags.dedup();

    let summary = options
        .summary
        .clone()
        .or_else(|| readme_summary(root))
        .unwrap_or_else(|| format!("repository {repo_id}"));

    let mut pages = Vec::new();
    let env_id = format!("{repo_id}:env");
    if !env_files.is_empty() {
        let mut content = String::new();
        let mut snippets = Vec::new();
        for f in &env_files {
            let text = read_text(&root.join(f)).unwrap_or_default();
            content.push_str(&format!("{f}:\n{}\n", bounded(&text, CONTENT_MAX_CHARS / env_files.len().max(1))));
            snippets.push(snippet(&text));
        }
        let mut page = KnowledgePage::new(&env_id, PageType::Environment, format!("{repo_id} environment"), content)
            .with_source(&repo_id);
        page.code_snippets = snippets;
        pages.push(page);
    }

    let heur_ids: Vec<String> = heur_files.iter().map(|f| format!("{repo_id}:heur:{f}")).collect();
    for f in &impl_files {
        let text = read_text(&root.join(f)).unwrap_or_default();
        let mut page = KnowledgePage::new(
            format!("{repo_id}:impl:{f}"),
            PageType::Implementation,
            format!("{repo_id} entrypoint {f}"),
            bounded(&text, CONTENT_MAX_CHARS),
        )
        .with_source(&repo_id);
        page.code_snippets = vec![snippet(&text)];
        if !env_files.is_empty() {
            page.edges.push(super::TypedEdge::new(EdgeType::RequiresEnv, &env_id));
        }
        for h in &heur_ids {
            page.edges.push(super::TypedEdge::new(EdgeType::UsesHeuristic, h));
        }
        pages.push(page);
    }
    for (f, id) in heur_files.iter().zip(&heur_ids) {
        let text = read_text(&root.join(f)).unwrap_or_default();
        let mut page = KnowledgePage::new(id, PageType::Heuristic, format!("{repo_id} {f}"), bounded(&text, CONTENT_MAX_CHARS))
            .with_source(&repo_id);
        page.code_snippets = vec![snippet(&text)];
        pages.push(page);
    }

    let entry = RepoEntry {
        repo_id: repo_id.clone(),
        location: root.to_string_lossy().to_string(),
        commit_id,
        tags,
        summary,
        embedding: None,
    };
    if let Some(extractor) = options.principles {
        for mut page in extractor.extract(&entry, &pages) {
            page.page_type = PageType::Principle;
            page.source_repo = Some(repo_id.clone());
            pages.push(page);
        }
    }
    Ok((entry, pages))
}

impl super::KnowledgeStore {
    /// Mine a repository and index the result.
    pub fn ingest(&mut self, root: &Path, options: &IngestOptions<'_>) -> Result<RepoEntry, KnowledgeError> {
        let (entry, pages) = ingest_repo(root, options)?;
        self.add_repo(entry.clone())?;
        self.index_pages(pages)?;
        Ok(entry)
    }
}
