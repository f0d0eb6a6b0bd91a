//! Generic subprocess evaluator.
//!
//! Runs `sh <entrypoint>` inside the working tree with a hard timeout. The
//! process receives `KAPSO_ARTIFACT_DIR`, `KAPSO_SEED`, and
//! `KAPSO_ROLLOUT_INDEX` in its environment and must write `result.json`
//! (an object of numeric metrics plus an optional `detail` string) into the
//! artifact directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    ContextDocument, Direction, Evaluator, EvaluatorConfig, EvaluatorError, MeasurementRecord,
    RunContext, SelectionRule, DEFAULT_METRIC, RESULT_FILE,
};

const POLL_INTERVAL: Duration = Duration::from_millis(10);
const MAX_CAPTURE: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct CommandEvaluator {
    entrypoint: String,
    metric: String,
    direction: Direction,
    statement: String,
}

impl CommandEvaluator {
    pub fn new(entrypoint: impl Into<String>) -> Self {
        Self {
            entrypoint: entrypoint.into(),
            metric: DEFAULT_METRIC.into(),
            direction: Direction::Maximize,
            statement: String::new(),
        }
    }

    /// Options: `entrypoint` (default `run.sh`), `metric`, `direction`
    /// (`maximize` | `minimize`), `statement`.
    pub fn from_config(config: &EvaluatorConfig) -> Result<Self, EvaluatorError> {
        let direction = match config.extra.get("direction").map(String::as_str) {
            None | Some("maximize") => Direction::Maximize,
            Some("minimize") => Direction::Minimize,
            Some(other) => {
                return Err(EvaluatorError::Config(format!(
                    "direction must be maximize or minimize, got {other:?}"
                )))
            }
        };
        let entrypoint: String = config.option("entrypoint")?.unwrap_or_else(|| "run.sh".into());
        if !super::is_contained_relative(&entrypoint) {
            return Err(EvaluatorError::Config(format!("entrypoint {entrypoint:?} must be a relative path")));
        }
        Ok(Self {
            entrypoint,
            metric: config.option("metric")?.unwrap_or_else(|| DEFAULT_METRIC.into()),
            direction,
            statement: config.extra.get("statement").cloned().unwrap_or_default(),
        })
    }
}

fn tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.len().saturating_sub(20);
    lines[start..].join("\n")
}

fn spawn_reader<R: Read + Send + 'static>(stream: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(s) = stream {
            let _ = s.take(MAX_CAPTURE as u64).read_to_end(&mut buf);
        }
        buf
    })
}

impl Evaluator for CommandEvaluator {
    fn name(&self) -> &str {
        "command"
    }

    fn selection_rule(&self) -> SelectionRule {
        SelectionRule::ScalarUtility { direction: self.direction, metric: self.metric.clone() }
    }

    fn entrypoint(&self) -> Option<&str> {
        Some(&self.entrypoint)
    }

    fn run(&self, ctx: &RunContext<'_>) -> MeasurementRecord {
        let script = ctx.worktree.join(&self.entrypoint);
        if !script.is_file() {
            return MeasurementRecord::error(format!("missing entrypoint {}", self.entrypoint));
        }
        let artifact_dir = match ctx.artifact_dir.canonicalize() {
            Ok(p) => p,
            Err(e) => return MeasurementRecord::error(format!("artifact directory unavailable: {e}")),
        };
        let mut child = match Command::new("sh")
            .arg(&self.entrypoint)
            .current_dir(ctx.worktree)
            .env("KAPSO_ARTIFACT_DIR", &artifact_dir)
            .env("KAPSO_SEED", ctx.seed.to_string())
            .env("KAPSO_ROLLOUT_INDEX", ctx.rollout_index.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return MeasurementRecord::error(format!("cannot start {}: {e}", self.entrypoint)),
        };
        let stdout = spawn_reader(child.stdout.take());
        let stderr = spawn_reader(child.stderr.take());

        let deadline = Instant::now() + ctx.config.timeout();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return MeasurementRecord::error("timeout");
                }
                Ok(None) => thread::sleep(POLL_INTERVAL),
                Err(e) => return MeasurementRecord::error(format!("wait failed: {e}")),
            }
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        let _ = fs::write(ctx.artifact_dir.join("stdout.log"), &out);
        let _ = fs::write(ctx.artifact_dir.join("stderr.log"), &err);
        let logs = vec!["stdout.log".to_string(), "stderr.log".to_string()];

        if !status.success() {
            let mut r = MeasurementRecord::error(format!("entrypoint exited with {status}\n{}", tail(&err)));
            r.artifacts = logs;
            return r;
        }

        let result_path = ctx.artifact_dir.join(RESULT_FILE);
        let parsed = fs::read_to_string(&result_path)
            .map_err(|e| format!("missing {RESULT_FILE}: {e}"))
            .and_then(|text| {
                serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&text)
                    .map_err(|e| format!("malformed {RESULT_FILE}: {e}"))
            });
        let object = match parsed {
            Ok(o) => o,
            Err(msg) => {
                let mut r = MeasurementRecord::contract_violation(msg);
                r.artifacts = logs;
                return r;
            }
        };
        let mut metrics = BTreeMap::new();
        let mut detail = String::new();
        for (k, v) in object {
            match v {
                serde_json::Value::Number(n) => {
                    if let Some(f) = n.as_f64() {
                        metrics.insert(k, f);
                    }
                }
                serde_json::Value::String(s) if k == "detail" => detail = s,
                _ => {}
            }
        }
        if !metrics.contains_key(&self.metric) {
            let mut r = MeasurementRecord::contract_violation(format!(
                "{RESULT_FILE} lacks numeric `{}`",
                self.metric
            ));
            r.artifacts = logs;
            return r;
        }
        let mut r = MeasurementRecord::success(metrics).with_feedback(detail);
        r.artifacts = logs;
        r.artifacts.push(RESULT_FILE.into());
        r
    }

    fn problem_context(&self, _beta: f64) -> ContextDocument {
        let mut doc = ContextDocument::new(if self.statement.is_empty() {
            format!(
                "Provide {} which writes {RESULT_FILE} with a numeric `{}` into $KAPSO_ARTIFACT_DIR.",
                self.entrypoint, self.metric
            )
        } else {
            self.statement.clone()
        });
        doc.constraints.insert("entrypoint".into(), self.entrypoint.clone());
        doc.constraints.insert("metric".into(), self.metric.clone());
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{run_artifact, Status};

    fn run(script: Option<&str>, timeout_ms: u64) -> MeasurementRecord {
        let tree = tempfile::tempdir().unwrap();
        if let Some(s) = script {
            fs::write(tree.path().join("run.sh"), s).unwrap();
        }
        let art = tempfile::tempdir().unwrap();
        let cfg = EvaluatorConfig { timeout_ms, ..Default::default() };
        run_artifact(&CommandEvaluator::new("run.sh"), tree.path(), art.path(), &cfg, 0).unwrap()
    }

    #[test]
    fn success_reads_result_json() {
        let r = run(Some("echo '{\"score\": 2.5, \"detail\": \"ok\"}' > \"$KAPSO_ARTIFACT_DIR/result.json\"\n"), 5_000);
        assert_eq!(r.status, Status::Success);
        assert_eq!(r.metric("score"), Some(2.5));
        assert_eq!(r.feedback, "ok");
        assert!(r.artifacts.contains(&"rollout-0/result.json".to_string()));
    }

    #[test]
    fn missing_entrypoint_is_error() {
        let r = run(None, 1_000);
        assert_eq!(r.status, Status::Error);
        assert!(r.feedback.contains("run.sh"));
    }

    #[test]
    fn timeout_is_error_with_timeout_feedback() {
        let r = run(Some("sleep 5\n"), 200);
        assert_eq!(r.status, Status::Error);
        assert_eq!(r.feedback, "timeout");
    }

    #[test]
    fn malformed_output_is_contract_violation() {
        let r = run(Some("echo nope > \"$KAPSO_ARTIFACT_DIR/result.json\"\n"), 5_000);
        assert_eq!(r.status, Status::ContractViolation);
        let r = run(Some("true\n"), 5_000);
        assert_eq!(r.status, Status::ContractViolation);
    }

    #[test]
    fn nonzero_exit_is_error_with_stderr() {
        let r = run(Some("echo kaboom >&2; exit 3\n"), 5_000);
        assert_eq!(r.status, Status::Error);
        assert!(r.feedback.contains("kaboom"));
    }
}
