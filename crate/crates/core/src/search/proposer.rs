//! Solution-spec proposers.
//!
//! A proposer turns the rendered context and history into the summary and
//! instructions of a new spec. Deterministic proposers make whole runs
//! reproducible; the HTTP proposer asks a model.

use serde_json::Value;

use crate::agent::{ChatClient, ChatMessage, ContextDocument, HistoryLine, HttpAgentConfig, ScriptedPayload};

use super::{SolutionSpec, SpecOrigin};

#[derive(Debug, Clone, Copy)]
pub struct ProposalRequest<'a> {
    pub context: &'a ContextDocument,
    pub history: &'a [HistoryLine],
    pub parent_branch: &'a str,
    /// Spec of the node being expanded, for tree search.
    pub parent_spec: Option<&'a SolutionSpec>,
    pub origin: SpecOrigin,
    /// Run-wide proposal counter, starting at 0.
    pub ordinal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposedSpec {
    pub summary: String,
    pub instructions: String,
}

pub trait Proposer: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, request: &ProposalRequest<'_>) -> Result<ProposedSpec, String>;
}

/// Emits scripted payloads in order; the last one repeats once the list is
/// exhausted.
#[derive(Debug, Clone)]
pub struct PayloadSequenceProposer {
    payloads: Vec<ScriptedPayload>,
}

impl PayloadSequenceProposer {
    pub fn new(payloads: Vec<ScriptedPayload>) -> Result<Self, String> {
        if payloads.is_empty() {
            return Err("payload sequence is empty".into());
        }
        Ok(Self { payloads })
    }
}

impl Proposer for PayloadSequenceProposer {
    fn name(&self) -> &str {
        "payload_sequence"
    }

    fn propose(&self, request: &ProposalRequest<'_>) -> Result<ProposedSpec, String> {
        let index = usize::try_from(request.ordinal).unwrap_or(usize::MAX).min(self.payloads.len() - 1);
        let payload = &self.payloads[index];
        let files: Vec<&str> = payload.implement.keys().map(String::as_str).collect();
        Ok(ProposedSpec {
            summary: format!("scripted payload {index}: write {}", files.join(", ")),
            instructions: payload.to_instructions(),
        })
    }
}

type ProposeFn = dyn Fn(&ProposalRequest<'_>) -> Result<ProposedSpec, String> + Send + Sync;

/// Wraps a closure.
pub struct FnProposer {
    name: String,
    f: Box<ProposeFn>,
}

impl FnProposer {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&ProposalRequest<'_>) -> Result<ProposedSpec, String> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }
}

impl Proposer for FnProposer {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&self, request: &ProposalRequest<'_>) -> Result<ProposedSpec, String> {
        (self.f)(request)
    }
}

/// Round-robin over several backends by proposal ordinal.
pub struct EnsembleProposer {
    members: Vec<Box<dyn Proposer>>,
}

impl EnsembleProposer {
    pub fn new(members: Vec<Box<dyn Proposer>>) -> Result<Self, String> {
        if members.is_empty() {
            return Err("ensemble needs at least one proposer".into());
        }
        Ok(Self { members })
    }
}

impl Proposer for EnsembleProposer {
    fn name(&self) -> &str {
        "ensemble"
    }

    fn propose(&self, request: &ProposalRequest<'_>) -> Result<ProposedSpec, String> {
        let member = &self.members[(request.ordinal % self.members.len() as u64) as usize];
        member.propose(request).map_err(|e| format!("{}: {e}", member.name()))
    }
}

const PROPOSER_PROMPT: &str = "You propose the next change to try for an optimization task. \
Reply with a single JSON object {\"summary\": one line, \"instructions\": detailed implementation instructions}.";

/// Model-backed proposer over the same chat endpoint contract as the HTTP
/// agent.
#[derive(Debug, Clone)]
pub struct HttpProposer {
    client: ChatClient,
}

impl HttpProposer {
    pub fn new(config: HttpAgentConfig) -> Self {
        Self { client: ChatClient::new(config) }
    }
}

impl Proposer for HttpProposer {
    fn name(&self) -> &str {
        "http"
    }

    fn propose(&self, request: &ProposalRequest<'_>) -> Result<ProposedSpec, String> {
        let mut user = format!("{}\n\nBranch from: {}\n", request.context.text, request.parent_branch);
        if let Some(parent) = request.parent_spec {
            user.push_str(&format!("Refine the parent idea: {}\n", parent.summary));
        }
        let messages = vec![ChatMessage::new("system", PROPOSER_PROMPT), ChatMessage::new("user", user)];
        let (object, _) = self.client.complete(&messages)?;
        let field = |name: &str| match object.get(name) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            _ => Err(format!("proposal reply lacks a nonempty `{name}` string")),
        };
        Ok(ProposedSpec { summary: field("summary")?, instructions: field("instructions")? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(ordinal: u64, context: &ContextDocument) -> ProposalRequest<'_> {
        ProposalRequest {
            context,
            history: &[],
            parent_branch: "root",
            parent_spec: None,
            origin: SpecOrigin::Linear,
            ordinal,
        }
    }

    #[test]
    fn sequence_clamps_to_last() {
        let p = PayloadSequenceProposer::new(vec![
            ScriptedPayload::implement([("params.txt", "0")]),
            ScriptedPayload::implement([("params.txt", "4")]),
        ])
        .unwrap();
        let ctx = ContextDocument::default();
        let a = p.propose(&request(0, &ctx)).unwrap();
        let b = p.propose(&request(1, &ctx)).unwrap();
        let c = p.propose(&request(9, &ctx)).unwrap();
        assert_ne!(a, b);
        assert_eq!(b, c);
        assert_eq!(a, p.propose(&request(0, &ctx)).unwrap());
        assert!(PayloadSequenceProposer::new(vec![]).is_err());
    }

    #[test]
    fn ensemble_round_robin() {
        let make = |tag: &'static str| -> Box<dyn Proposer> {
            Box::new(FnProposer::new(tag, move |_| {
                Ok(ProposedSpec { summary: tag.into(), instructions: String::new() })
            }))
        };
        let e = EnsembleProposer::new(vec![make("a"), make("b")]).unwrap();
        let ctx = ContextDocument::default();
        let picks: Vec<String> = (0..4).map(|i| e.propose(&request(i, &ctx)).unwrap().summary).collect();
        assert_eq!(picks, ["a", "b", "a", "b"]);
    }

    #[test]
    fn http_proposer_unreachable() {
        let p = HttpProposer::new(HttpAgentConfig {
            endpoint: "http://127.0.0.1:9/".into(),
            model: "m".into(),
            token_env: None,
            timeout_ms: 2_000,
        });
        let ctx = ContextDocument::default();
        assert!(p.propose(&request(0, &ctx)).is_err());
    }
}
