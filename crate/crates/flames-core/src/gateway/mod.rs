//! Uniform client for chat-completion endpoints: sampling configuration,
//! bounded-concurrency batching, retries with backoff, and a deterministic
//! mock provider for offline runs.

mod http;
mod mock;

pub use mock::{MockMode, MockProvider};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

/// Sampling hyperparameters forwarded to the serving backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k.
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub max_new_tokens: u32,
}

impl SamplingConfig {
    /// Problem/solution synthesis defaults.
    pub fn synthesis() -> Self {
        SamplingConfig {
            temperature: 0.7,
            top_p: 0.9,
            top_k: 50,
            repetition_penalty: 1.0,
            max_new_tokens: 2048,
        }
    }

    /// Greedy evaluation defaults.
    pub fn evaluation() -> Self {
        SamplingConfig {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            repetition_penalty: 1.0,
            max_new_tokens: 2048,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature < 0.0 {
            return Err(format!("temperature {} < 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.repetition_penalty <= 0.0 {
            return Err(format!(
                "repetition_penalty {} <= 0",
                self.repetition_penalty
            ));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub endpoint_name: String,
    pub system: Option<String>,
    pub messages: Vec<Message>,
    pub sampling: SamplingConfig,
    /// Stable key for mock replay and logging.
    pub request_tag: String,
}

impl ChatRequest {
    /// Messages may be empty only when a system prompt is present (the QFT
    /// agent sends system-only requests).
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() && self.system.is_none() {
            return Err(GatewayError::BadResponse {
                endpoint: self.endpoint_name.clone(),
                message: "request has neither messages nor a system prompt".into(),
            });
        }
        self.sampling
            .validate()
            .map_err(|m| GatewayError::BadResponse {
                endpoint: self.endpoint_name.clone(),
                message: format!("invalid sampling config: {m}"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Http,
    Mock,
}

/// One endpoint entry from the pipeline config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub kind: EndpointKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API key; keys never appear in config.
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default)]
    pub mock_script_path: Option<PathBuf>,
    #[serde(default = "MockMode::strict")]
    pub mock_mode: MockMode,
    /// Sampling fields the backend does not support; dropped with a warning.
    #[serde(default)]
    pub drop_sampling_fields: Vec<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Backoff before retry i (milliseconds); ±20% jitter is applied.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: Vec<u64>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> Vec<u64> {
    vec![1_000, 4_000, 16_000]
}

fn default_timeout_secs() -> u64 {
    300
}

impl EndpointConfig {
    pub fn mock(name: &str) -> Self {
        EndpointConfig {
            name: name.to_string(),
            kind: EndpointKind::Mock,
            base_url: None,
            model: None,
            api_key_env_var: None,
            mock_script_path: None,
            mock_mode: MockMode::HashFallback,
            drop_sampling_fields: Vec::new(),
            max_retries: default_max_retries(),
            backoff_ms: vec![1, 1, 1],
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// Outcome of a single provider call, before retry handling.
pub(crate) enum CallError {
    /// Worth retrying: connection failures, timeouts, 429/5xx.
    Transient(String),
    /// Terminal: unparseable body, authentication, 4xx.
    Fatal(String),
}

pub(crate) trait Provider: Send + Sync {
    fn call(&self, req: &ChatRequest) -> Result<Completion, CallError>;
}

struct Endpoint {
    provider: Box<dyn Provider>,
    max_retries: u32,
    backoff_ms: Vec<u64>,
}

/// Shareable gateway over all configured endpoints. `complete` is blocking;
/// `complete_many` owns its scheduling and bounds in-flight requests.
pub struct Gateway {
    endpoints: HashMap<String, Endpoint>,
    mocks: HashMap<String, Arc<MockProvider>>,
    cancel: Arc<AtomicBool>,
}

impl Gateway {
    pub fn new(configs: &[EndpointConfig]) -> Result<Self, GatewayError> {
        let mut endpoints = HashMap::new();
        let mut mocks = HashMap::new();
        for cfg in configs {
            let provider: Box<dyn Provider> = match cfg.kind {
                EndpointKind::Mock => {
                    let mock = Arc::new(MockProvider::from_config(cfg)?);
                    mocks.insert(cfg.name.clone(), Arc::clone(&mock));
                    Box::new(SharedMock(mock))
                }
                EndpointKind::Http => Box::new(http::HttpProvider::from_config(cfg)?),
            };
            endpoints.insert(
                cfg.name.clone(),
                Endpoint {
                    provider,
                    max_retries: cfg.max_retries,
                    backoff_ms: cfg.backoff_ms.clone(),
                },
            );
        }
        Ok(Gateway {
            endpoints,
            mocks,
            cancel: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Flag checked before every dispatch; setting it fails pending requests
    /// with `Cancelled`.
    pub fn cancel_token(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.cancel)
    }

    /// Mock provider instrumentation (tests and dry runs).
    pub fn mock(&self, endpoint_name: &str) -> Option<&MockProvider> {
        self.mocks.get(endpoint_name).map(|m| m.as_ref())
    }

    /// Issues one request, retrying transient failures with backoff.
    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let endpoint = self
            .endpoints
            .get(&req.endpoint_name)
            .ok_or_else(|| GatewayError::UnknownEndpoint(req.endpoint_name.clone()))?;

        let mut attempt: u32 = 0;
        loop {
            if self.cancel.load(Ordering::Relaxed) {
                return Err(GatewayError::Cancelled);
            }
            match endpoint.provider.call(req) {
                Ok(completion) => return Ok(completion),
                Err(CallError::Fatal(message)) => {
                    return Err(GatewayError::BadResponse {
                        endpoint: req.endpoint_name.clone(),
                        message,
                    })
                }
                Err(CallError::Transient(message)) => {
                    if attempt >= endpoint.max_retries {
                        return Err(GatewayError::EndpointUnreachable {
                            endpoint: req.endpoint_name.clone(),
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    let base = endpoint
                        .backoff_ms
                        .get(attempt as usize)
                        .copied()
                        .or_else(|| endpoint.backoff_ms.last().copied())
                        .unwrap_or(1_000);
                    // ±20% jitter; affects timing only, never output bytes.
                    let factor = rand::rng().random_range(0.8..=1.2);
                    std::thread::sleep(Duration::from_millis((base as f64 * factor) as u64));
                    attempt += 1;
                }
            }
        }
    }

    /// Issues requests with at most `max_in_flight` outstanding at any
    /// instant. Results align index-by-index with `reqs`; per-request
    /// failures are reported in-slot without aborting the batch.
    pub fn complete_many(
        &self,
        reqs: &[ChatRequest],
        max_in_flight: usize,
    ) -> Vec<Result<Completion, GatewayError>> {
        assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
        let results: Mutex<Vec<Option<Result<Completion, GatewayError>>>> =
            Mutex::new((0..reqs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = max_in_flight.min(reqs.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let result = self.complete(&reqs[i]);
                    results.lock().unwrap()[i] = Some(result);
                });
            }
        });

        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|slot| slot.expect("every slot filled"))
            .collect()
    }
}

/// Adapter so the same mock instance is visible both as a provider and for
/// instrumentation.
struct SharedMock(Arc<MockProvider>);

impl Provider for SharedMock {
    fn call(&self, req: &ChatRequest) -> Result<Completion, CallError> {
        self.0.call(req)
    }
}
