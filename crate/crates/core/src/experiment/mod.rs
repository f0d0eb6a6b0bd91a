//! Git-native experiment engine.
//!
//! A [`Workspace`] owns one base repository per run. Each experiment is a
//! [`SessionHandle`]: a private clone of the base (origin `file://<base>`)
//! checked out on a fresh branch from its parent. The session commits the
//! code changes together with a reproducible bundle under `.kapso/`, then
//! pushes the branch back into the base so it can immediately parent further
//! experiments. Branch allocation and publication are synchronized inside the
//! workspace; session execution is not.

mod bundle;
mod git;

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use thiserror::Error;
use walkdir::WalkDir;

use crate::canonical::{ext_real, from_json, to_canonical_pretty};
use crate::evaluator::{evaluate, AggregatedOutcome, Evaluator, EvaluatorConfig, EvaluatorError};
use crate::search::SolutionSpec;

pub use bundle::{
    ArtifactBundle, BundleManifest, DiffSummary, ARTIFACTS_DIR, BUNDLE_DIR, BUNDLE_FORMAT_VERSION, KEEP_FILE,
    LOGS_DIR, MANIFEST_PATH, RECORDS_DIR,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("refusing to initialize into non-empty directory {0}")]
    TargetNotEmpty(PathBuf),
    #[error("cannot read seed snapshot {path}: {reason}")]
    UnreadableSeed { path: PathBuf, reason: String },
    #[error("unknown branch {0}")]
    UnknownBranch(String),
    #[error("branch {0} already exists")]
    BranchExists(String),
    #[error("invalid branch name {0:?}")]
    InvalidBranchName(String),
    #[error("session {branch} is {actual:?}, expected {expected:?}")]
    InvalidState { branch: String, expected: SessionState, actual: SessionState },
    #[error("nothing to commit on {0}")]
    NothingToCommit(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("{0} is not an experiment branch (no bundle manifest)")]
    NotExperimentBranch(String),
    #[error("invalid run id {0:?}")]
    InvalidRunId(String),
    #[error(transparent)]
    Evaluator(#[from] EvaluatorError),
}

impl ExperimentError {
    fn io(path: &Path, source: io::Error) -> Self {
        ExperimentError::Io { path: path.to_path_buf(), source }
    }
}

/// One element of the experiment history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub branch: String,
    pub parent_branch: String,
    pub spec: SolutionSpec,
    #[serde(with = "ext_real")]
    pub beta: f64,
    pub rollouts: u32,
    pub aggregated: AggregatedOutcome,
    #[serde(with = "ext_real::option", default)]
    pub utility_estimate: Option<f64>,
    pub debug_tries: u32,
    #[serde(default)]
    pub cost: f64,
    pub commit: Option<String>,
    pub published: bool,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl ExperimentRecord {
    pub fn is_feasible(&self) -> bool {
        self.aggregated.is_feasible()
    }
}

/// Where the run's first commit comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSource {
    /// Copy the files of an existing repository or directory (without `.git`).
    Snapshot { path: PathBuf },
    /// README placeholder plus an optional empty entrypoint stub.
    Scaffold { goal: String, entrypoint: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Committed,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishResult {
    pub published: bool,
    pub branch: String,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitInfo {
    pub commit: String,
    pub manifest: BundleManifest,
}

/// A single-owner experiment session. Not for concurrent use by two callers.
#[derive(Debug)]
pub struct SessionHandle {
    pub branch_id: String,
    pub parent_branch: String,
    pub clone_path: PathBuf,
    state: SessionState,
    parent_head: String,
    commit: Option<String>,
    publish: Option<PublishResult>,
}

impl SessionHandle {
    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn worktree(&self) -> &Path {
        &self.clone_path
    }

    /// Where evaluator rollouts write their outputs.
    pub fn artifact_dir(&self) -> PathBuf {
        self.clone_path.join(ARTIFACTS_DIR)
    }

    pub fn parent_head(&self) -> &str {
        &self.parent_head
    }

    pub fn commit(&self) -> Option<&str> {
        self.commit.as_deref()
    }

    fn expect(&self, expected: SessionState) -> Result<(), ExperimentError> {
        if self.state != expected {
            return Err(ExperimentError::InvalidState {
                branch: self.branch_id.clone(),
                expected,
                actual: self.state,
            });
        }
        Ok(())
    }
}

/// A temporary checkout of a branch head. Dropping it deletes the directory.
#[derive(Debug)]
pub struct RepoCheckout {
    dir: TempDir,
    pub branch: String,
    pub commit: String,
}

impl RepoCheckout {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Keep the directory on disk and return its path.
    pub fn persist(self) -> PathBuf {
        self.dir.keep()
    }
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    base_repo_path: PathBuf,
    run_id: String,
    next_seq: AtomicU64,
    reserved: Mutex<BTreeSet<String>>,
    publication_lock: Mutex<()>,
}

fn absolute(path: &Path) -> Result<PathBuf, ExperimentError> {
    std::path::absolute(path).map_err(|e| ExperimentError::io(path, e))
}

fn is_dir_empty(path: &Path) -> Result<bool, ExperimentError> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_none()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(ExperimentError::io(path, e)),
    }
}

fn copy_snapshot(src: &Path, dest: &Path) -> Result<usize, ExperimentError> {
    let unreadable = |reason: String| ExperimentError::UnreadableSeed { path: src.to_path_buf(), reason };
    if !src.is_dir() {
        return Err(unreadable("not a readable directory".into()));
    }
    let mut copied = 0;
    let walker = WalkDir::new(src).min_depth(1).sort_by_file_name().into_iter();
    for entry in walker.filter_entry(|e| e.file_name() != ".git") {
        let entry = entry.map_err(|e| unreadable(e.to_string()))?;
        let rel = entry.path().strip_prefix(src).map_err(|e| unreadable(e.to_string()))?;
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).map_err(|e| ExperimentError::io(&target, e))?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &target).map_err(|e| unreadable(format!("{}: {e}", rel.display())))?;
            copied += 1;
        }
    }
    Ok(copied)
}

fn write_file(path: &Path, content: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| ExperimentError::io(path, e))
}

fn remove_path(path: &Path) -> Result<(), ExperimentError> {
    let result = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    match result {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(ExperimentError::io(path, e)),
    }
}

fn sanitize_branch(branch: &str) -> String {
    branch.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

impl Workspace {
    pub fn root_branch_for(run_id: &str) -> String {
        format!("kapso/{run_id}/root")
    }

    /// Create the base repository under `root/repo` with one commit on
    /// `kapso/<run_id>/root`. Refuses a non-empty `root`.
    pub fn init(root: &Path, source: &InitSource, run_id: &str) -> Result<Self, ExperimentError> {
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) {
            return Err(ExperimentError::InvalidRunId(run_id.to_string()));
        }
        let root = &absolute(root)?;
        if !is_dir_empty(root)? {
            return Err(ExperimentError::TargetNotEmpty(root.to_path_buf()));
        }
        let base = root.join("repo");
        fs::create_dir_all(&base).map_err(|e| ExperimentError::io(&base, e))?;
        fs::create_dir_all(root.join("sessions")).map_err(|e| ExperimentError::io(root, e))?;
        fs::create_dir_all(root.join("scratch")).map_err(|e| ExperimentError::io(root, e))?;

        match source {
            InitSource::Snapshot { path } => {
                copy_snapshot(path, &base)?;
            }
            InitSource::Scaffold { goal, entrypoint } => {
                write_file(&base.join("README.md"), &format!("# Scaffold\n\nGoal: {goal}\n"))?;
                if let Some(ep) = entrypoint {
                    write_file(&base.join(ep), "")?;
                }
            }
        }
        write_file(&base.join(KEEP_FILE), "")?;

        let root_branch = Self::root_branch_for(run_id);
        git::run(&base, &["init", "-q", "-b", &root_branch])?;
        git::run(&base, &["add", "-A"])?;
        let message = match source {
            InitSource::Snapshot { path } => format!("seed from {}", path.display()),
            InitSource::Scaffold { .. } => "scaffold".to_string(),
        };
        git::run(&base, &["commit", "-q", "-m", &message])?;

        Ok(Self {
            root: root.to_path_buf(),
            base_repo_path: base,
            run_id: run_id.to_string(),
            next_seq: AtomicU64::new(1),
            reserved: Mutex::new(BTreeSet::new()),
            publication_lock: Mutex::new(()),
        })
    }

    /// Reattach to a workspace created by [`Workspace::init`].
    pub fn open(root: &Path, run_id: &str) -> Result<Self, ExperimentError> {
        let root = &absolute(root)?;
        let base = root.join("repo");
        let root_branch = Self::root_branch_for(run_id);
        if !git::branch_exists(&base, &root_branch) {
            return Err(ExperimentError::UnknownBranch(root_branch));
        }
        let ws = Self {
            root: root.to_path_buf(),
            base_repo_path: base,
            run_id: run_id.to_string(),
            next_seq: AtomicU64::new(1),
            reserved: Mutex::new(BTreeSet::new()),
            publication_lock: Mutex::new(()),
        };
        let prefix = format!("kapso/{run_id}/exp-");
        let max = ws
            .branches()?
            .iter()
            .filter_map(|b| b.strip_prefix(&prefix).and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);
        ws.next_seq.store(max + 1, Ordering::SeqCst);
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_repo_path(&self) -> &Path {
        &self.base_repo_path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn root_branch(&self) -> String {
        Self::root_branch_for(&self.run_id)
    }

    /// Next `kapso/<run_id>/exp-<seq>` name. Allocation is atomic.
    pub fn allocate_branch(&self) -> String {
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        format!("kapso/{}/exp-{seq}", self.run_id)
    }

    pub fn branch_exists(&self, branch: &str) -> bool {
        git::branch_exists(&self.base_repo_path, branch)
    }

    pub fn head(&self, branch: &str) -> Result<String, ExperimentError> {
        if !self.branch_exists(branch) {
            return Err(ExperimentError::UnknownBranch(branch.to_string()));
        }
        git::run(&self.base_repo_path, &["rev-parse", &format!("refs/heads/{branch}")])
    }

    pub fn branches(&self) -> Result<Vec<String>, ExperimentError> {
        let out = git::run(&self.base_repo_path, &["for-each-ref", "--format=%(refname:short)", "refs/heads/"])?;
        Ok(out.lines().map(str::to_string).collect())
    }

    /// True when `ancestor` is reachable from `descendant`'s head.
    pub fn is_ancestor(&self, ancestor: &str, descendant: &str) -> bool {
        git::succeeds(&self.base_repo_path, &["merge-base", "--is-ancestor", ancestor, descendant])
    }

    /// Clone the workspace into a private directory and check out a new
    /// branch `branch_id` at `parent_branch`'s head.
    pub fn open_session(&self, parent_branch: &str, branch_id: &str) -> Result<SessionHandle, ExperimentError> {
        if !git::valid_branch_name(&self.base_repo_path, branch_id) {
            return Err(ExperimentError::InvalidBranchName(branch_id.to_string()));
        }
        if !self.branch_exists(parent_branch) {
            return Err(ExperimentError::UnknownBranch(parent_branch.to_string()));
        }
        {
            let mut reserved = self.reserved.lock().unwrap_or_else(|e| e.into_inner());
            if reserved.contains(branch_id) || self.branch_exists(branch_id) {
                return Err(ExperimentError::BranchExists(branch_id.to_string()));
            }
            reserved.insert(branch_id.to_string());
        }
        let result = self.clone_for_session(parent_branch, branch_id);
        if result.is_err() {
            self.release(branch_id);
        }
        result
    }

    fn release(&self, branch_id: &str) {
        self.reserved.lock().unwrap_or_else(|e| e.into_inner()).remove(branch_id);
    }

    fn clone_for_session(&self, parent_branch: &str, branch_id: &str) -> Result<SessionHandle, ExperimentError> {
        let clone_path = self.root.join("sessions").join(sanitize_branch(branch_id));
        remove_path(&clone_path)?;
        let url = git::file_url(&self.base_repo_path);
        let clone_str = clone_path.to_string_lossy().to_string();
        git::run(&self.root, &["clone", "-q", "-b", parent_branch, &url, &clone_str])?;
        git::run(&clone_path, &["checkout", "-q", "-b", branch_id])?;
        let parent_head = git::run(&clone_path, &["rev-parse", "HEAD"])?;

        // The parent's bundle describes the parent, not this experiment.
        for stale in [MANIFEST_PATH, RECORDS_DIR, LOGS_DIR, ARTIFACTS_DIR] {
            remove_path(&clone_path.join(stale))?;
        }

        Ok(SessionHandle {
            branch_id: branch_id.to_string(),
            parent_branch: parent_branch.to_string(),
            clone_path,
            state: SessionState::Open,
            parent_head,
            commit: None,
            publish: None,
        })
    }

    /// Commit the working-tree changes and the serialized bundle on the
    /// session branch.
    pub fn commit_run(&self, session: &mut SessionHandle, bundle: &ArtifactBundle) -> Result<CommitInfo, ExperimentError> {
        session.expect(SessionState::Open)?;
        bundle.validate().map_err(ExperimentError::InvalidBundle)?;
        let tree = session.clone_path.clone();

        let mut record_files = Vec::new();
        for (k, record) in bundle.rollout_records.iter().enumerate() {
            let rel = format!("{RECORDS_DIR}/rollout-{k}.json");
            write_file(&tree.join(&rel), &to_canonical_pretty(record)?)?;
            record_files.push(rel);
        }
        let mut log_files = Vec::new();
        for (name, text) in &bundle.logs {
            let rel = format!("{LOGS_DIR}/{}", ArtifactBundle::log_file_name(name));
            write_file(&tree.join(&rel), text)?;
            log_files.push(rel);
        }
        let artifact_root = tree.join(ARTIFACTS_DIR);
        let mut artifact_files: Vec<String> = WalkDir::new(&artifact_root)
            .sort_by_file_name()
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .filter_map(|e| e.path().strip_prefix(&tree).ok().map(|p| p.to_string_lossy().to_string()))
            .collect();
        artifact_files.sort();

        git::run(&tree, &["add", "-A"])?;
        let changed = git::run(&tree, &["diff", "--cached", "--name-only", &session.parent_head])?;
        let bundle_prefix = format!("{BUNDLE_DIR}/");
        let changed_paths: Vec<String> = changed
            .lines()
            .filter(|p| !p.is_empty() && !p.starts_with(&bundle_prefix))
            .map(str::to_string)
            .collect();

        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            spec_id: bundle.spec.spec_id.clone(),
            spec: bundle.spec.clone(),
            branch: session.branch_id.clone(),
            parent_branch: bundle.parent_branch.clone(),
            evaluator: bundle.evaluator.clone(),
            evaluator_config: bundle.evaluator_config.clone(),
            rollouts: bundle.evaluator_config.rollouts,
            beta: bundle.beta,
            status: bundle.aggregated.status,
            utility_estimate: bundle.utility_estimate,
            debug_tries: bundle.debug_tries,
            record_files,
            log_files,
            artifact_files,
            diff_summary: DiffSummary { parent_commit: session.parent_head.clone(), changed_paths },
        };
        write_file(&tree.join(MANIFEST_PATH), &to_canonical_pretty(&manifest)?)?;
        git::run(&tree, &["add", "-A"])?;
        if git::succeeds(&tree, &["diff", "--cached", "--quiet"]) {
            return Err(ExperimentError::NothingToCommit(session.branch_id.clone()));
        }
        let message = format!("experiment {}: {}", bundle.spec.spec_id, bundle.aggregated.status.as_str());
        git::run(&tree, &["commit", "-q", "-m", &message])?;
        let commit = git::run(&tree, &["rev-parse", "HEAD"])?;
        session.commit = Some(commit.clone());
        session.state = SessionState::Committed;
        Ok(CommitInfo { commit, manifest })
    }

    /// Push the session branch into the workspace repository and remove the
    /// clone. A rejected push is retried once after a fetch; if it still
    /// fails the clone is kept for inspection. Repeated calls return the
    /// first result.
    pub fn close_session(&self, session: &mut SessionHandle) -> Result<PublishResult, ExperimentError> {
        if let Some(done) = &session.publish {
            return Ok(done.clone());
        }
        session.expect(SessionState::Committed)?;
        let branch = session.branch_id.clone();
        let attempt = {
            let _guard = self.publication_lock.lock().unwrap_or_else(|e| e.into_inner());
            let refspec = format!("refs/heads/{branch}:refs/heads/{branch}");
            match git::run(&session.clone_path, &["push", "-q", "origin", &refspec]) {
                Ok(_) => Ok(()),
                Err(first) => {
                    let _ = git::run(&session.clone_path, &["fetch", "-q", "origin"]);
                    git::run(&session.clone_path, &["push", "-q", "origin", &refspec])
                        .map(|_| ())
                        .map_err(|second| format!("{first}; retry: {second}"))
                }
            }
        };
        let result = match attempt {
            Ok(()) => {
                remove_path(&session.clone_path)?;
                PublishResult { published: true, branch, diagnostic: None }
            }
            Err(diagnostic) => PublishResult { published: false, branch, diagnostic: Some(diagnostic) },
        };
        session.state = SessionState::Closed;
        session.publish = Some(result.clone());
        Ok(result)
    }

    /// Drop an open session without publishing.
    pub fn abandon_session(&self, session: &mut SessionHandle) -> Result<(), ExperimentError> {
        if session.state == SessionState::Closed {
            return Ok(());
        }
        remove_path(&session.clone_path)?;
        session.state = SessionState::Closed;
        session.publish = Some(PublishResult {
            published: false,
            branch: session.branch_id.clone(),
            diagnostic: Some("abandoned".into()),
        });
        Ok(())
    }

    /// Fresh temporary checkout of a branch head. The caller owns it.
    pub fn repo_state(&self, branch: &str) -> Result<RepoCheckout, ExperimentError> {
        let commit = self.head(branch)?;
        let scratch = self.root.join("scratch");
        fs::create_dir_all(&scratch).map_err(|e| ExperimentError::io(&scratch, e))?;
        let dir = tempfile::Builder::new()
            .prefix("state-")
            .tempdir_in(&scratch)
            .map_err(|e| ExperimentError::io(&scratch, e))?;
        self.checkout_into(branch, dir.path())?;
        Ok(RepoCheckout { dir, branch: branch.to_string(), commit })
    }

    /// Check out `branch` into `dest` (which must not exist or be empty).
    pub fn checkout_into(&self, branch: &str, dest: &Path) -> Result<(), ExperimentError> {
        if !self.branch_exists(branch) {
            return Err(ExperimentError::UnknownBranch(branch.to_string()));
        }
        if !is_dir_empty(dest)? {
            return Err(ExperimentError::TargetNotEmpty(dest.to_path_buf()));
        }
        let dest = &absolute(dest)?;
        let url = git::file_url(&self.base_repo_path);
        let dest_str = dest.to_string_lossy().to_string();
        git::run(&self.root, &["clone", "-q", "--single-branch", "-b", branch, &url, &dest_str])?;
        Ok(())
    }

    /// Read `.kapso/experiment.json` from a branch.
    pub fn read_manifest(&self, branch: &str) -> Result<BundleManifest, ExperimentError> {
        if !self.branch_exists(branch) {
            return Err(ExperimentError::UnknownBranch(branch.to_string()));
        }
        let out = git::output(&self.base_repo_path, &["show", &format!("refs/heads/{branch}:{MANIFEST_PATH}")])?;
        if !out.status.success() {
            return Err(ExperimentError::NotExperimentBranch(branch.to_string()));
        }
        Ok(from_json(&String::from_utf8_lossy(&out.stdout))?)
    }

    /// Raw bytes of a committed file on a branch.
    pub fn read_file(&self, branch: &str, path: &str) -> Result<Vec<u8>, ExperimentError> {
        let out = git::output(&self.base_repo_path, &["show", &format!("refs/heads/{branch}:{path}")])?;
        if !out.status.success() {
            return Err(ExperimentError::Git {
                command: format!("show {branch}:{path}"),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(out.stdout)
    }

    /// Re-run an experiment branch under its committed evaluator
    /// configuration (or `config_override`).
    pub fn reproduce(
        &self,
        branch: &str,
        evaluator: &dyn Evaluator,
        config_override: Option<&EvaluatorConfig>,
    ) -> Result<AggregatedOutcome, ExperimentError> {
        let manifest = self.read_manifest(branch)?;
        let checkout = self.repo_state(branch)?;
        let config = config_override.cloned().unwrap_or(manifest.evaluator_config);
        let artifacts = tempfile::Builder::new()
            .prefix("reproduce-")
            .tempdir_in(self.root.join("scratch"))
            .map_err(|e| ExperimentError::io(&self.root, e))?;
        Ok(evaluate(evaluator, checkout.path(), artifacts.path(), &config)?)
    }
}

#[cfg(test)]
mod tests;
