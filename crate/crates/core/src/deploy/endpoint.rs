//! JSON-over-HTTP runner for endpoint strategies.

use std::time::Duration;

use serde_json::{Map, Value};

use super::{normalize_reply, Runner};

pub const DEFAULT_DOCKER_ENDPOINT: &str = "http://localhost:8000/predict";

/// POSTs the inputs map as the body. Health is a GET against `health_url`,
/// or the endpoint itself when none is set; any reply below 500 counts.
#[derive(Debug, Clone)]
pub struct EndpointRunner {
    pub url: String,
    pub health_url: Option<String>,
    pub timeout: Duration,
}

impl EndpointRunner {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), health_url: None, timeout: Duration::from_secs(30) }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

impl Runner for EndpointRunner {
    fn invoke(&mut self, inputs: &Map<String, Value>) -> Result<Value, String> {
        let body = Value::Object(inputs.clone()).to_string();
        let mut response = self
            .agent()
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| format!("transport error contacting {}: {e}", self.url))?;
        let status = response.status();
        let text = response.body_mut().read_to_string().map_err(|e| format!("cannot read reply: {e}"))?;
        if !status.is_success() {
            return Err(format!("endpoint returned HTTP {status}: {}", text.chars().take(500).collect::<String>()));
        }
        let reply: Value = serde_json::from_str(&text).map_err(|e| format!("reply is not JSON: {e}"))?;
        let normalized = normalize_reply(reply);
        match normalized.get("status").and_then(Value::as_str) {
            Some("success") => Ok(normalized.get("output").cloned().unwrap_or(Value::Null)),
            _ => Err(normalized.get("error").and_then(Value::as_str).unwrap_or("unspecified error").to_string()),
        }
    }

    fn is_healthy(&self) -> bool {
        let url = self.health_url.as_deref().unwrap_or(&self.url);
        self.agent().get(url).call().is_ok_and(|r| r.status().as_u16() < 500)
    }
}
