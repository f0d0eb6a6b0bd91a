//! JSON-over-HTTP model adapter.
//!
//! Requests are `{"model": ..., "messages": [{"role", "content"}, ...]}`
//! posted to a configured endpoint, with an optional bearer token read from
//! a named environment variable. The reply must contain a JSON object
//! `{"files": {path: content|null}, "notes": string}`, either as the whole
//! body, or inside the first choice's message content. Anything else is a
//! failure and nothing is applied.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{apply_file_operations, extract_json_object, CodingAgent, EditMode, EditRequest, EditResult, FileOperations};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpAgentConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// Minimal chat-completion client shared by the HTTP agent and proposer.
#[derive(Debug, Clone)]
pub struct ChatClient {
    config: HttpAgentConfig,
}

impl ChatClient {
    pub fn new(config: HttpAgentConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &HttpAgentConfig {
        &self.config
    }

    /// Send the conversation and return the reply's JSON object plus the raw
    /// reply text (for transcripts).
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<(Map<String, Value>, String), String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let body = json!({ "model": self.config.model, "messages": messages });
        let mut request = agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?;
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| format!("transport error contacting {}: {e}", self.config.endpoint))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| format!("transport error reading reply: {e}"))?;
        if !status.is_success() {
            return Err(format!("endpoint returned HTTP {status}: {}", text.chars().take(500).collect::<String>()));
        }
        let object = reply_object(&text).ok_or_else(|| "reply contains no JSON object".to_string())?;
        Ok((object, text))
    }
}

/// The JSON object carried by a reply: the body itself when it is not a
/// chat envelope, otherwise the object embedded in the message content.
fn reply_object(text: &str) -> Option<Map<String, Value>> {
    let body: Value = serde_json::from_str(text).ok()?;
    let content = body
        .pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/message/content"))
        .or_else(|| body.get("content"))
        .and_then(Value::as_str);
    match content {
        Some(c) => extract_json_object(c),
        None => body.as_object().cloned(),
    }
}

fn reply_cost(object: &Map<String, Value>) -> f64 {
    object
        .get("cost")
        .and_then(Value::as_f64)
        .filter(|c| c.is_finite() && *c >= 0.0)
        .unwrap_or(0.0)
}

/// Parse `{"files": {...}, "notes": "..."}` strictly.
fn parse_file_reply(object: &Map<String, Value>) -> Result<(FileOperations, String), String> {
    let files = object
        .get("files")
        .and_then(Value::as_object)
        .ok_or_else(|| "reply lacks a `files` object".to_string())?;
    let mut ops = FileOperations::new();
    for (path, content) in files {
        match content {
            Value::String(s) => {
                ops.insert(path.clone(), Some(s.clone()));
            }
            Value::Null => {
                ops.insert(path.clone(), None);
            }
            _ => return Err(format!("file {path:?} has non-string content")),
        }
    }
    let notes = match object.get("notes") {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("`notes` must be a string".into()),
    };
    Ok((ops, notes))
}

const SYSTEM_PROMPT: &str = "You edit a repository to implement or debug a solution specification. \
Reply with a single JSON object {\"files\": {relative path: full new content or null to delete}, \"notes\": string}.";

#[derive(Debug, Clone)]
pub struct HttpAgent {
    client: ChatClient,
}

impl HttpAgent {
    pub fn new(config: HttpAgentConfig) -> Self {
        Self { client: ChatClient::new(config) }
    }

    fn messages(request: &EditRequest) -> Vec<ChatMessage> {
        let mut user = format!(
            "{}\n\n# Solution specification {}\n{}\n\n{}\n",
            request.context.text, request.spec.spec_id, request.spec.summary, request.spec.instructions
        );
        if request.mode == EditMode::Debug {
            if let Some(failing) = &request.failing_record {
                user.push_str("\n# Failing measurement\n");
                user.push_str(&crate::canonical::to_canonical_pretty(failing).unwrap_or_default());
                user.push_str("Repair the failure. Do not optimize the objective in this step.\n");
            }
        }
        vec![ChatMessage::new("system", SYSTEM_PROMPT), ChatMessage::new("user", user)]
    }
}

impl CodingAgent for HttpAgent {
    fn name(&self) -> &str {
        "http"
    }

    fn apply_edits(&self, request: &EditRequest) -> EditResult {
        if !request.is_well_formed() {
            return EditResult::failed("debug request without a failing record", String::new());
        }
        let messages = Self::messages(request);
        let mut transcript = messages
            .iter()
            .map(|m| format!(">>> {}\n{}\n", m.role, m.content))
            .collect::<String>();
        let (object, raw) = match self.client.complete(&messages) {
            Ok(pair) => pair,
            Err(e) => return EditResult::failed(e, transcript),
        };
        transcript.push_str(&format!("<<< reply\n{raw}\n"));
        let cost = reply_cost(&object);
        let (ops, notes) = match parse_file_reply(&object) {
            Ok(pair) => pair,
            Err(e) => {
                let mut r = EditResult::failed(format!("non-conforming reply: {e}"), transcript);
                r.cost = cost;
                return r;
            }
        };
        let mut result = match apply_file_operations(&request.worktree, &ops) {
            Ok(changed) => EditResult::applied(changed, transcript),
            Err(e) => EditResult::failed(e, transcript),
        };
        if !notes.is_empty() {
            result.transcript.push_str(&format!("notes: {notes}\n"));
        }
        result.cost = cost;
        result
    }
}
