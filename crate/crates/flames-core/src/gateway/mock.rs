//! Deterministic mock provider: request tags map to scripted completions
//! loaded from a fixture file, or to hash-derived pseudo-completions.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CallError, ChatRequest, Completion, EndpointConfig, FinishReason, Provider};
use crate::error::GatewayError;

/// Strict mode treats an unscripted tag as an error; hash-fallback derives a
/// deterministic pseudo-completion from the tag digest instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    Strict,
    HashFallback,
}

impl MockMode {
    pub(crate) fn strict() -> Self {
        MockMode::Strict
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    Text(String),
    Full(ScriptRecord),
}

#[derive(Debug, Clone, Deserialize)]
struct ScriptRecord {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    /// Fail the first N calls with a transient error before succeeding.
    #[serde(default)]
    fail_times: Option<u32>,
    /// Always fail: "transient" or "bad_response".
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Clone)]
struct Script {
    text: String,
    finish_reason: FinishReason,
    fail_times: u32,
    error: Option<String>,
}

impl From<ScriptEntry> for Script {
    fn from(entry: ScriptEntry) -> Self {
        match entry {
            ScriptEntry::Text(text) => Script {
                text,
                finish_reason: FinishReason::Stop,
                fail_times: 0,
                error: None,
            },
            ScriptEntry::Full(rec) => Script {
                text: rec.text,
                finish_reason: match rec.finish_reason.as_deref() {
                    Some("length") => FinishReason::Length,
                    Some("error") => FinishReason::Error,
                    _ => FinishReason::Stop,
                },
                fail_times: rec.fail_times.unwrap_or(0),
                error: rec.error,
            },
        }
    }
}

pub struct MockProvider {
    mode: MockMode,
    scripts: Mutex<HashMap<String, Script>>,
    calls: Mutex<HashMap<String, u32>>,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    latency_ms: AtomicUsize,
}

impl MockProvider {
    pub fn new(mode: MockMode) -> Self {
        MockProvider {
            mode,
            scripts: Mutex::new(HashMap::new()),
            calls: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            latency_ms: AtomicUsize::new(0),
        }
    }

    pub(crate) fn from_config(cfg: &EndpointConfig) -> Result<Self, GatewayError> {
        let provider = MockProvider::new(cfg.mock_mode);
        if let Some(path) = &cfg.mock_script_path {
            let data = std::fs::read_to_string(path).map_err(|e| GatewayError::BadResponse {
                endpoint: cfg.name.clone(),
                message: format!("cannot read mock script {}: {e}", path.display()),
            })?;
            let entries: HashMap<String, ScriptEntry> =
                serde_json::from_str(&data).map_err(|e| GatewayError::BadResponse {
                    endpoint: cfg.name.clone(),
                    message: format!("malformed mock script {}: {e}", path.display()),
                })?;
            let mut scripts = provider.scripts.lock().unwrap();
            for (tag, entry) in entries {
                scripts.insert(tag, entry.into());
            }
        }
        Ok(provider)
    }

    /// Scripts a plain completion for a tag.
    pub fn script(&self, tag: &str, text: &str) {
        self.scripts.lock().unwrap().insert(
            tag.to_string(),
            Script {
                text: text.to_string(),
                finish_reason: FinishReason::Stop,
                fail_times: 0,
                error: None,
            },
        );
    }

    /// Scripts a completion with an explicit finish reason.
    pub fn script_full(&self, tag: &str, text: &str, finish_reason: &str) {
        self.scripts.lock().unwrap().insert(
            tag.to_string(),
            Script {
                text: text.to_string(),
                finish_reason: match finish_reason {
                    "length" => FinishReason::Length,
                    "error" => FinishReason::Error,
                    _ => FinishReason::Stop,
                },
                fail_times: 0,
                error: None,
            },
        );
    }

    /// Makes the first `n` calls for `tag` fail with a transient error.
    pub fn fail_times(&self, tag: &str, n: u32) {
        let mut scripts = self.scripts.lock().unwrap();
        scripts
            .entry(tag.to_string())
            .or_insert_with(|| Script {
                text: String::new(),
                finish_reason: FinishReason::Stop,
                fail_times: 0,
                error: None,
            })
            .fail_times = n;
    }

    pub fn call_count(&self, tag: &str) -> u32 {
        self.calls.lock().unwrap().get(tag).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> u32 {
        self.calls.lock().unwrap().values().sum()
    }

    /// Highest number of concurrently active calls observed.
    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::Relaxed)
    }

    /// Artificial per-call latency so concurrency is observable in tests.
    pub fn set_latency_ms(&self, ms: usize) {
        self.latency_ms.store(ms, Ordering::Relaxed);
    }

    /// Deterministic pseudo-completion derived from the tag digest. Ends in
    /// a boxed single digit so downstream answer extraction finds something.
    pub fn hash_completion(tag: &str) -> String {
        let digest = Sha256::digest(tag.as_bytes());
        let hex = hex::encode(&digest[..6]);
        let answer = digest[0] % 10;
        format!("Deterministic mock completion {hex}. The final answer is \\boxed{{{answer}}}.")
    }
}

impl Provider for MockProvider {
    fn call(&self, req: &ChatRequest) -> Result<Completion, CallError> {
        let active = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(active, Ordering::SeqCst);
        let latency = self.latency_ms.load(Ordering::Relaxed);
        if latency > 0 {
            std::thread::sleep(Duration::from_millis(latency as u64));
        }

        let result = self.dispatch(req);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

impl MockProvider {
    fn dispatch(&self, req: &ChatRequest) -> Result<Completion, CallError> {
        let tag = &req.request_tag;
        let call_no = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry(tag.clone()).or_insert(0);
            *n += 1;
            *n
        };

        let script = self.scripts.lock().unwrap().get(tag).cloned();
        match script {
            Some(script) => {
                if let Some(kind) = &script.error {
                    return Err(match kind.as_str() {
                        "bad_response" => CallError::Fatal("scripted bad response".into()),
                        _ => CallError::Transient("scripted failure".into()),
                    });
                }
                if call_no <= script.fail_times {
                    return Err(CallError::Transient(format!(
                        "scripted transient failure {call_no}/{}",
                        script.fail_times
                    )));
                }
                Ok(Completion {
                    text: script.text,
                    finish_reason: script.finish_reason,
                    usage: None,
                })
            }
            None => match self.mode {
                MockMode::Strict => Err(CallError::Fatal(format!(
                    "unscripted tag {tag:?} in strict mock mode"
                ))),
                MockMode::HashFallback => Ok(Completion {
                    text: Self::hash_completion(tag),
                    finish_reason: FinishReason::Stop,
                    usage: None,
                }),
            },
        }
    }
}
