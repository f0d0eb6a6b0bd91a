//! LOCAL strategy: a Python entry shim run as a child process per call.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};

use super::{
    split_callable, AdaptOptions, DeployAdapter, DeployError, DeployStrategy, Invocation, RunInterfaceDescriptor,
    Runner,
};

pub const DEFAULT_CALLABLE: &str = "main:predict";
pub const SHIM_FILE: &str = "kapso_entry.py";
const RESULT_MARKER: &str = "KAPSO_RESULT ";
const POLL_INTERVAL: Duration = Duration::from_millis(10);
const MAX_CAPTURE: u64 = 1 << 20;

/// Reads `{"callable", "inputs"}` on stdin and prints one marked JSON line.
/// Anything the solution prints goes to stderr. With `--check` it only
/// resolves the callable.
const SHIM: &str = r#"import importlib, json, sys, traceback

MARKER = "KAPSO_RESULT "


def emit(out, obj):
    out.write(MARKER + json.dumps(obj) + "\n")
    out.flush()


def resolve(ref):
    module_name, _, func_name = ref.partition(":")
    try:
        module = importlib.import_module(module_name)
        func = getattr(module, func_name)
    except Exception as exc:
        raise LookupError("cannot resolve %s: %s: %s" % (ref, type(exc).__name__, exc))
    if not callable(func):
        raise LookupError("cannot resolve %s: not callable" % ref)
    return func


def main():
    out = sys.stdout
    sys.stdout = sys.stderr
    sys.path.insert(0, ".")
    try:
        request = json.loads(sys.stdin.read() or "{}")
        func = resolve(request["callable"])
        if "--check" in sys.argv:
            emit(out, {"ok": True})
            return
        value = func(request.get("inputs", {}))
        text = json.dumps(value)
    except Exception as exc:
        detail = traceback.format_exc(limit=5)
        emit(out, {"ok": False, "error": "%s: %s\n%s" % (type(exc).__name__, exc, detail)})
        return
    out.write(MARKER + '{"ok": true, "output": ' + text + "}\n")
    out.flush()


main()
"#;

#[derive(Debug, Clone)]
pub struct LocalAdapter {
    pub python: String,
    pub timeout: Duration,
}

impl Default for LocalAdapter {
    fn default() -> Self {
        Self {
            python: std::env::var("KAPSO_PYTHON").unwrap_or_else(|_| "python3".into()),
            timeout: Duration::from_secs(60),
        }
    }
}

impl DeployAdapter for LocalAdapter {
    fn strategy(&self) -> DeployStrategy {
        DeployStrategy::Local
    }

    fn adapt(&self, adapted: &Path, options: &AdaptOptions) -> Result<RunInterfaceDescriptor, DeployError> {
        let callable = options.callable.clone().unwrap_or_else(|| DEFAULT_CALLABLE.to_string());
        split_callable(&callable)?;
        let shim = adapted.join(SHIM_FILE);
        std::fs::write(&shim, SHIM).map_err(|e| DeployError::io(&shim, e))?;
        Ok(RunInterfaceDescriptor {
            strategy: DeployStrategy::Local,
            invocation: Invocation::Callable(callable),
            adapted_path: adapted.to_path_buf(),
        })
    }

    fn runner(&self, descriptor: &RunInterfaceDescriptor) -> Box<dyn Runner> {
        let callable = match &descriptor.invocation {
            Invocation::Callable(c) => c.clone(),
            Invocation::Endpoint(_) => DEFAULT_CALLABLE.to_string(),
        };
        Box::new(LocalRunner {
            root: descriptor.adapted_path.clone(),
            callable,
            python: self.python.clone(),
            timeout: self.timeout,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LocalRunner {
    pub root: PathBuf,
    pub callable: String,
    pub python: String,
    pub timeout: Duration,
}

fn reader<R: Read + Send + 'static>(stream: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(s) = stream {
            let _ = s.take(MAX_CAPTURE).read_to_end(&mut buf);
        }
        buf
    })
}

fn stderr_tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(10)..].join("\n")
}

impl LocalRunner {
    /// Run the shim once and return its decoded result object.
    fn call(&self, inputs: &Map<String, Value>, check: bool) -> Result<Map<String, Value>, String> {
        let mut cmd = Command::new(&self.python);
        cmd.arg(SHIM_FILE);
        if check {
            cmd.arg("--check");
        }
        let mut child = cmd
            .current_dir(&self.root)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", self.python))?;
        let request = json!({ "callable": self.callable, "inputs": inputs }).to_string();
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(request.as_bytes());
        }
        let stdout = reader(child.stdout.take());
        let stderr = reader(child.stderr.take());
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("{} timed out after {} ms", self.callable, self.timeout.as_millis()));
                }
                Ok(None) => thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(format!("wait failed: {e}")),
            }
        };
        let out = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
        let err = stderr.join().unwrap_or_default();
        let line = out.lines().rev().find_map(|l| l.strip_prefix(RESULT_MARKER));
        let Some(line) = line else {
            return Err(format!(
                "{} exited with {status} without a result\n{}",
                self.callable,
                stderr_tail(&err)
            ));
        };
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(o)) => Ok(o),
            _ => Err(format!("{} produced an unreadable result", self.callable)),
        }
    }
}

impl Runner for LocalRunner {
    fn start(&mut self) -> Result<(), String> {
        if self.root.join(SHIM_FILE).is_file() {
            Ok(())
        } else {
            Err(format!("{} is missing from {}", SHIM_FILE, self.root.display()))
        }
    }

    fn invoke(&mut self, inputs: &Map<String, Value>) -> Result<Value, String> {
        let mut result = self.call(inputs, false)?;
        if result.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(result.remove("output").unwrap_or(Value::Null))
        } else {
            Err(result.get("error").and_then(Value::as_str).unwrap_or("unspecified error").to_string())
        }
    }

    fn is_healthy(&self) -> bool {
        self.root.join(SHIM_FILE).is_file()
            && self
                .call(&Map::new(), true)
                .is_ok_and(|r| r.get("ok").and_then(Value::as_bool) == Some(true))
    }
}
