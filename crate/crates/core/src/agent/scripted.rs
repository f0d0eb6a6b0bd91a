//! Deterministic agent for tests and offline runs.
//!
//! The solution spec's `instructions` carry a JSON payload:
//!
//! ```json
//! {"implement": {"params.txt": "7"}, "debug": {"params.txt": "7"}}
//! ```
//!
//! Implement mode applies `implement` verbatim; debug mode applies `debug`
//! when present and otherwise changes nothing. A `null` content deletes.

use serde::{Deserialize, Serialize};

use super::{apply_file_operations, extract_json_object, CodingAgent, EditMode, EditRequest, EditResult, FileOperations};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScriptedPayload {
    #[serde(default)]
    pub implement: FileOperations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debug: Option<FileOperations>,
}

impl ScriptedPayload {
    pub fn implement(ops: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>) -> Self {
        Self {
            implement: ops.into_iter().map(|(p, c)| (p.into(), Some(c.into()))).collect(),
            debug: None,
        }
    }

    pub fn with_debug(mut self, ops: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>) -> Self {
        self.debug = Some(ops.into_iter().map(|(p, c)| (p.into(), Some(c.into()))).collect());
        self
    }

    /// Serialized form suitable for `SolutionSpec::instructions`.
    pub fn to_instructions(&self) -> String {
        crate::canonical::to_canonical_line(self).unwrap_or_default()
    }

    pub fn parse(instructions: &str) -> Result<Self, String> {
        let object = extract_json_object(instructions)
            .ok_or_else(|| "instructions contain no JSON payload object".to_string())?;
        serde_json::from_value(serde_json::Value::Object(object)).map_err(|e| format!("malformed scripted payload: {e}"))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedAgent;

impl CodingAgent for ScriptedAgent {
    fn name(&self) -> &str {
        "scripted"
    }

    fn apply_edits(&self, request: &EditRequest) -> EditResult {
        if !request.is_well_formed() {
            return EditResult::failed("debug request without a failing record", String::new());
        }
        let payload = match ScriptedPayload::parse(&request.spec.instructions) {
            Ok(p) => p,
            Err(e) => return EditResult::failed(e, String::new()),
        };
        let ops = match request.mode {
            EditMode::Implement => payload.implement,
            EditMode::Debug => match payload.debug {
                Some(ops) => ops,
                None => return EditResult::applied(Vec::new(), "debug: no fix payload; tree unchanged\n".into()),
            },
        };
        let mut transcript = format!("{:?} {}\n", request.mode, request.spec.spec_id);
        for (path, content) in &ops {
            match content {
                Some(c) => transcript.push_str(&format!("write {path} ({} bytes)\n", c.len())),
                None => transcript.push_str(&format!("delete {path}\n")),
            }
        }
        match apply_file_operations(&request.worktree, &ops) {
            Ok(changed) => EditResult::applied(changed, transcript),
            Err(e) => EditResult::failed(e, transcript),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ContextDocument;
    use crate::evaluator::MeasurementRecord;
    use crate::search::{SolutionSpec, SpecOrigin};
    use std::fs;

    fn spec(instructions: String) -> SolutionSpec {
        SolutionSpec {
            spec_id: "spec-0001".into(),
            summary: "set x".into(),
            instructions,
            parent_branch: "kapso/r1/root".into(),
            origin: SpecOrigin::Linear,
        }
    }

    #[test]
    fn implement_payload_is_applied_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(ScriptedPayload::implement([("params.txt", "7")]).to_instructions());
        let r = ScriptedAgent.apply_edits(&EditRequest::implement(s, ContextDocument::default(), dir.path().into()));
        assert!(r.ok);
        assert_eq!(r.changed_paths, vec!["params.txt"]);
        assert_eq!(fs::read_to_string(dir.path().join("params.txt")).unwrap(), "7");
    }

    #[test]
    fn debug_fix_creates_file() {
        let dir = tempfile::tempdir().unwrap();
        let payload = ScriptedPayload::implement([("notes.txt", "hi")]).with_debug([("params.txt", "7")]);
        let failing = MeasurementRecord::contract_violation("missing required file params.txt");
        let req = EditRequest::debug(spec(payload.to_instructions()), ContextDocument::default(), failing, dir.path().into());
        let r = ScriptedAgent.apply_edits(&req);
        assert!(r.ok);
        assert_eq!(r.changed_paths, vec!["params.txt"]);
        assert!(dir.path().join("params.txt").exists());
    }

    #[test]
    fn escaping_payload_fails() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(ScriptedPayload::implement([("../escape", "x")]).to_instructions());
        let r = ScriptedAgent.apply_edits(&EditRequest::implement(s, ContextDocument::default(), dir.path().into()));
        assert!(!r.ok);
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn malformed_payload_fails_with_parse_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec("just do it".into());
        let r = ScriptedAgent.apply_edits(&EditRequest::implement(s, ContextDocument::default(), dir.path().into()));
        assert!(!r.ok);
        assert!(r.diagnostic.unwrap().contains("JSON"));
        let s = spec(r#"{"implement": {"a": 3}}"#.into());
        let r = ScriptedAgent.apply_edits(&EditRequest::implement(s, ContextDocument::default(), dir.path().into()));
        assert!(!r.ok);
    }

    #[test]
    fn identical_requests_give_identical_results() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = spec(ScriptedPayload::implement([("params.txt", "3"), ("x/y.txt", "z")]).to_instructions());
        let ra = ScriptedAgent.apply_edits(&EditRequest::implement(s.clone(), ContextDocument::default(), a.path().into()));
        let rb = ScriptedAgent.apply_edits(&EditRequest::implement(s, ContextDocument::default(), b.path().into()));
        assert_eq!(ra, rb);
        assert_eq!(fs::read(a.path().join("x/y.txt")).unwrap(), fs::read(b.path().join("x/y.txt")).unwrap());
    }
}
