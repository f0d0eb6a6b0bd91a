//! Thin wrapper over the `git` command line.

use std::path::Path;
use std::process::{Command, Output};

use super::ExperimentError;

const IDENTITY: [(&str, &str); 4] = [
    ("GIT_AUTHOR_NAME", "kapso"),
    ("GIT_AUTHOR_EMAIL", "kapso@localhost"),
    ("GIT_COMMITTER_NAME", "kapso"),
    ("GIT_COMMITTER_EMAIL", "kapso@localhost"),
];

fn command(dir: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new("git");
    cmd.current_dir(dir)
        .args([
            "-c", "commit.gpgsign=false",
            "-c", "core.autocrlf=false",
            "-c", "core.hooksPath=/dev/null",
            "-c", "protocol.file.allow=always",
            "-c", "advice.detachedHead=false",
        ])
        .args(args)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_TERMINAL_PROMPT", "0")
        .env_remove("GIT_DIR")
        .env_remove("GIT_WORK_TREE")
        .env_remove("GIT_INDEX_FILE");
    for (k, v) in IDENTITY {
        cmd.env(k, v);
    }
    cmd
}

pub(crate) fn output(dir: &Path, args: &[&str]) -> Result<Output, ExperimentError> {
    command(dir, args).output().map_err(|e| ExperimentError::Git {
        command: args.join(" "),
        stderr: format!("cannot run git: {e}"),
    })
}

/// Run git and return trimmed stdout, failing on a non-zero exit.
pub(crate) fn run(dir: &Path, args: &[&str]) -> Result<String, ExperimentError> {
    let out = output(dir, args)?;
    if !out.status.success() {
        return Err(ExperimentError::Git {
            command: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Run git and report only whether it exited successfully.
pub(crate) fn succeeds(dir: &Path, args: &[&str]) -> bool {
    output(dir, args).map(|o| o.status.success()).unwrap_or(false)
}

pub(crate) fn branch_exists(repo: &Path, branch: &str) -> bool {
    succeeds(repo, &["rev-parse", "--verify", "--quiet", &format!("refs/heads/{branch}")])
}

pub(crate) fn valid_branch_name(repo: &Path, branch: &str) -> bool {
    succeeds(repo, &["check-ref-format", &format!("refs/heads/{branch}")])
}

pub(crate) fn file_url(path: &Path) -> String {
    format!("file://{}", path.display())
}
