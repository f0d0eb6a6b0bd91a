//! Deployment behind a uniform software handle.
//!
//! [`adapt_repository`] copies a solution to `<path>_adapted_<STRATEGY>`,
//! lets the strategy's adapter add its wrapper files, and returns a
//! [`RunInterfaceDescriptor`]. A [`SoftwareHandle`] then runs the adapted
//! solution and normalizes every reply to one of two shapes:
//!
//! ```text
//! {"status": "success", "output": <value>}
//! {"status": "error",   "error":  <text>}
//! ```

mod endpoint;
mod local;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use endpoint::{EndpointRunner, DEFAULT_DOCKER_ENDPOINT};
pub use local::{LocalAdapter, LocalRunner, DEFAULT_CALLABLE, SHIM_FILE};

pub const DESCRIPTOR_PATH: &str = ".kapso/run_interface.json";

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("unsupported deploy strategy {name:?}; available: {available}")]
    Unsupported { name: String, available: String },
    #[error("adapted path {0} already exists")]
    Collision(PathBuf),
    #[error("solution path {0} is not a directory")]
    InvalidSolution(PathBuf),
    #[error("invalid run interface descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl DeployError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeployStrategy {
    Local,
    Docker,
    Modal,
    Bentoml,
    Langgraph,
}

impl DeployStrategy {
    pub const ALL: [DeployStrategy; 5] = [Self::Local, Self::Docker, Self::Modal, Self::Bentoml, Self::Langgraph];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Local => "LOCAL",
            Self::Docker => "DOCKER",
            Self::Modal => "MODAL",
            Self::Bentoml => "BENTOML",
            Self::Langgraph => "LANGGRAPH",
        }
    }

    /// Whether the strategy is reached over HTTP rather than by a callable.
    pub fn is_endpoint(self) -> bool {
        self != Self::Local
    }
}

impl fmt::Display for DeployStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeployStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown deploy strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invocation {
    /// `module.path:function`
    Callable(String),
    Endpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInterfaceDescriptor {
    pub strategy: DeployStrategy,
    pub invocation: Invocation,
    pub adapted_path: PathBuf,
}

impl RunInterfaceDescriptor {
    pub fn validate(&self) -> Result<(), DeployError> {
        match (&self.invocation, self.strategy.is_endpoint()) {
            (Invocation::Callable(c), false) => split_callable(c).map(|_| ()),
            (Invocation::Endpoint(url), true) if url.starts_with("http://") || url.starts_with("https://") => Ok(()),
            (Invocation::Endpoint(url), true) => Err(DeployError::InvalidDescriptor(format!("bad endpoint URL {url:?}"))),
            (_, false) => Err(DeployError::InvalidDescriptor(format!("{} needs a callable reference", self.strategy))),
            (_, true) => Err(DeployError::InvalidDescriptor(format!("{} needs an endpoint URL", self.strategy))),
        }
    }

    pub fn load(adapted_path: &Path) -> Result<Self, DeployError> {
        let path = adapted_path.join(DESCRIPTOR_PATH);
        let text = std::fs::read_to_string(&path).map_err(|e| DeployError::io(&path, e))?;
        let d: Self = serde_json::from_str(&text)?;
        d.validate()?;
        Ok(d)
    }
}

/// Split `"module.path:function"`.
pub fn split_callable(reference: &str) -> Result<(&str, &str), DeployError> {
    let valid_ident = |s: &str| {
        !s.is_empty()
            && s.split('.').all(|part| {
                part.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                    && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            })
    };
    match reference.split_once(':') {
        Some((m, f)) if valid_ident(m) && valid_ident(f) && !f.contains('.') => Ok((m, f)),
        _ => Err(DeployError::InvalidDescriptor(format!("callable reference {reference:?} must look like module:function"))),
    }
}

/// Runs one adapted solution. `invoke` returns the output value or an error
/// text; the handle wraps either in the normalized shape.
pub trait Runner: Send {
    fn start(&mut self) -> Result<(), String> {
        Ok(())
    }

    fn stop(&mut self) {}

    fn invoke(&mut self, inputs: &Map<String, Value>) -> Result<Value, String>;

    fn is_healthy(&self) -> bool;
}

/// Per-strategy wrapper generation plus the runner for the result.
pub trait DeployAdapter: Send + Sync {
    fn strategy(&self) -> DeployStrategy;

    /// Add wrapper files inside the already-copied `adapted` tree.
    fn adapt(&self, adapted: &Path, options: &AdaptOptions) -> Result<RunInterfaceDescriptor, DeployError>;

    fn runner(&self, descriptor: &RunInterfaceDescriptor) -> Box<dyn Runner>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdaptOptions {
    /// Callable reference for callable strategies. Defaults to `main:predict`.
    pub callable: Option<String>,
    /// Endpoint for HTTP strategies.
    pub endpoint: Option<String>,
}

/// Installed adapters. [`AdapterRegistry::default`] has LOCAL only.
pub struct AdapterRegistry {
    adapters: BTreeMap<DeployStrategy, Box<dyn DeployAdapter>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = Self { adapters: BTreeMap::new() };
        r.register(Box::new(LocalAdapter::default()));
        r
    }
}

impl AdapterRegistry {
    pub fn register(&mut self, adapter: Box<dyn DeployAdapter>) {
        self.adapters.insert(adapter.strategy(), adapter);
    }

    pub fn available(&self) -> Vec<DeployStrategy> {
        self.adapters.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn DeployAdapter, DeployError> {
        let unsupported = || DeployError::Unsupported {
            name: name.to_string(),
            available: self.available().iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "),
        };
        let strategy = DeployStrategy::from_str(name).map_err(|_| unsupported())?;
        self.adapters.get(&strategy).map(|a| a.as_ref()).ok_or_else(unsupported)
    }

    /// Handle for an already-adapted tree.
    pub fn handle(&self, descriptor: RunInterfaceDescriptor) -> Result<SoftwareHandle, DeployError> {
        descriptor.validate()?;
        let adapter = self.get(descriptor.strategy.as_str())?;
        let runner = adapter.runner(&descriptor);
        Ok(SoftwareHandle::new(descriptor, runner))
    }
}

pub fn adapted_path_for(solution: &Path, strategy: DeployStrategy) -> PathBuf {
    let trimmed = solution.components().as_path();
    let mut name = trimmed.as_os_str().to_os_string();
    name.push(format!("_adapted_{}", strategy.as_str()));
    PathBuf::from(name)
}

fn copy_tree(src: &Path, dest: &Path) -> Result<(), DeployError> {
    for entry in walkdir::WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(src).to_path_buf();
            DeployError::Io { path, source: e.into() }
        })?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under its root");
        if rel.components().next().is_some_and(|c| c.as_os_str() == ".git") {
            continue;
        }
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target).map_err(|e| DeployError::io(&target, e))?;
        } else if entry.file_type().is_file() {
            std::fs::copy(entry.path(), &target).map_err(|e| DeployError::io(&target, e))?;
        }
    }
    Ok(())
}

/// Copy `solution` to `<solution>_adapted_<STRATEGY>` and let the adapter
/// wrap it. The source tree is only read.
pub fn adapt_repository(
    solution: &Path,
    strategy: &str,
    options: &AdaptOptions,
    registry: &AdapterRegistry,
) -> Result<RunInterfaceDescriptor, DeployError> {
    let adapter = registry.get(strategy)?;
    if !solution.is_dir() {
        return Err(DeployError::InvalidSolution(solution.to_path_buf()));
    }
    let adapted = adapted_path_for(solution, adapter.strategy());
    if adapted.exists() {
        return Err(DeployError::Collision(adapted));
    }
    copy_tree(solution, &adapted)?;
    let descriptor = match adapter.adapt(&adapted, options) {
        Ok(d) => d,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&adapted);
            return Err(e);
        }
    };
    descriptor.validate()?;
    let path = adapted.join(DESCRIPTOR_PATH);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DeployError::io(parent, e))?;
    }
    std::fs::write(&path, crate::canonical::to_canonical_pretty(&descriptor)?).map_err(|e| DeployError::io(&path, e))?;
    Ok(descriptor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Created,
    Started,
    Stopped,
}

/// Normalized success.
pub fn success(output: Value) -> Value {
    json!({ "status": "success", "output": output })
}

/// Normalized error.
pub fn failure(error: impl Into<String>) -> Value {
    json!({ "status": "error", "error": error.into() })
}

/// Whether `v` has exactly one of the two normalized shapes.
pub fn is_normalized(v: &Value) -> bool {
    let Some(o) = v.as_object() else { return false };
    match o.get("status").and_then(Value::as_str) {
        Some("success") => o.len() == 2 && o.contains_key("output"),
        Some("error") => o.len() == 2 && o.get("error").is_some_and(Value::is_string),
        _ => false,
    }
}

/// Fold an arbitrary reply into a normalized shape. Replies already carrying
/// a status keep it; anything else counts as the output.
pub fn normalize_reply(reply: Value) -> Value {
    if let Some(o) = reply.as_object() {
        match o.get("status").and_then(Value::as_str) {
            Some("success") => return success(o.get("output").cloned().unwrap_or(Value::Null)),
            Some("error") => {
                let text = match o.get("error") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => "unspecified error".to_string(),
                };
                return failure(text);
            }
            _ => {}
        }
    }
    success(reply)
}

struct HandleState {
    lifecycle: Lifecycle,
    log: String,
    runner: Box<dyn Runner>,
}

/// The deployed solution. Invocations on one handle are serialized.
pub struct SoftwareHandle {
    descriptor: RunInterfaceDescriptor,
    state: Mutex<HandleState>,
}

impl fmt::Debug for SoftwareHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SoftwareHandle").field("descriptor", &self.descriptor).field("state", &self.lifecycle()).finish()
    }
}

impl SoftwareHandle {
    pub fn new(descriptor: RunInterfaceDescriptor, runner: Box<dyn Runner>) -> Self {
        Self { descriptor, state: Mutex::new(HandleState { lifecycle: Lifecycle::Created, log: String::new(), runner }) }
    }

    pub fn descriptor(&self) -> &RunInterfaceDescriptor {
        &self.descriptor
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HandleState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lock().lifecycle
    }

    /// Idempotent.
    pub fn start(&self) -> Result<(), String> {
        let mut s = self.lock();
        start_locked(&mut s)
    }

    /// Idempotent; stopping a handle that never started is a no-op.
    pub fn stop(&self) {
        let mut s = self.lock();
        if s.lifecycle == Lifecycle::Started {
            s.runner.stop();
            s.lifecycle = Lifecycle::Stopped;
            s.log.push_str("stopped\n");
        }
    }

    pub fn logs(&self) -> String {
        self.lock().log.clone()
    }

    pub fn is_healthy(&self) -> bool {
        self.lock().runner.is_healthy()
    }

    /// Invoke the solution. Always returns a normalized map.
    pub fn run(&self, inputs: &Map<String, Value>) -> Value {
        let mut s = self.lock();
        if s.lifecycle == Lifecycle::Created {
            if let Err(e) = start_locked(&mut s) {
                return failure(format!("start failed: {e}"));
            }
        }
        if s.lifecycle != Lifecycle::Started {
            return failure("handle is stopped");
        }
        let result = match s.runner.invoke(inputs) {
            Ok(v) => success(v),
            Err(e) => failure(e),
        };
        let line = format!(
            "run inputs={} -> {}\n",
            Value::Object(inputs.clone()),
            result.get("status").and_then(Value::as_str).unwrap_or("error")
        );
        s.log.push_str(&line);
        if let Some(e) = result.get("error").and_then(Value::as_str) {
            s.log.push_str(&format!("  {e}\n"));
        }
        result
    }
}

fn start_locked(s: &mut HandleState) -> Result<(), String> {
    if s.lifecycle == Lifecycle::Started {
        return Ok(());
    }
    s.runner.start()?;
    s.lifecycle = Lifecycle::Started;
    s.log.push_str("started\n");
    Ok(())
}

#[cfg(test)]
mod tests;
