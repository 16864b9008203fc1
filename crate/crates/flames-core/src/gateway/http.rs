//! OpenAI-compatible chat-completions provider over HTTP.

use std::collections::HashSet;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    CallError, ChatRequest, Completion, EndpointConfig, FinishReason, Provider, TokenUsage,
};
use crate::error::GatewayError;

pub(crate) struct HttpProvider {
    name: String,
    url: String,
    model: String,
    api_key: Option<String>,
    drop_fields: HashSet<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub(crate) fn from_config(cfg: &EndpointConfig) -> Result<Self, GatewayError> {
        let base_url = cfg
            .base_url
            .clone()
            .ok_or_else(|| GatewayError::BadResponse {
                endpoint: cfg.name.clone(),
                message: "http endpoint requires base_url".into(),
            })?;
        let model = cfg.model.clone().ok_or_else(|| GatewayError::BadResponse {
            endpoint: cfg.name.clone(),
            message: "http endpoint requires model".into(),
        })?;
        let api_key = match &cfg.api_key_env_var {
            Some(var) => match std::env::var(var) {
                Ok(key) => Some(key),
                Err(_) => {
                    log::warn!(
                        "endpoint {}: api key env var {var} is not set, sending unauthenticated",
                        cfg.name
                    );
                    None
                }
            },
            None => None,
        };
        if !cfg.drop_sampling_fields.is_empty() {
            log::warn!(
                "endpoint {}: dropping unsupported sampling fields: {}",
                cfg.name,
                cfg.drop_sampling_fields.join(", ")
            );
        }
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build();
        Ok(HttpProvider {
            name: cfg.name.clone(),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model,
            api_key,
            drop_fields: cfg.drop_sampling_fields.iter().cloned().collect(),
            agent: config.into(),
        })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut messages: Vec<Value> = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        for m in &req.messages {
            messages.push(json!({"role": m.role.as_str(), "content": m.content}));
        }
        let mut body = json!({
            "model": self.model,
            "messages": messages,
        });
        let fields = [
            ("temperature", json!(req.sampling.temperature)),
            ("top_p", json!(req.sampling.top_p)),
            ("max_tokens", json!(req.sampling.max_new_tokens)),
            ("top_k", json!(req.sampling.top_k)),
            ("repetition_penalty", json!(req.sampling.repetition_penalty)),
        ];
        for (name, value) in fields {
            if self.drop_fields.contains(name) {
                continue;
            }
            // top_k = 0 means disabled; do not forward it.
            if name == "top_k" && req.sampling.top_k == 0 {
                continue;
            }
            body[name] = value;
        }
        body
    }

    fn parse_response(&self, text: &str) -> Result<Completion, CallError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CallError::Fatal(format!("non-JSON body: {e}")))?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| CallError::Fatal("response has no choices".into()))?;
        let content = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| CallError::Fatal("choice has no message content".into()))?;
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Error,
        };
        let usage = value.get("usage").and_then(|u| {
            Some(TokenUsage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(Completion {
            text: content.to_string(),
            finish_reason,
            usage,
        })
    }
}

impl Provider for HttpProvider {
    fn call(&self, req: &ChatRequest) -> Result<Completion, CallError> {
        let body = self.body(req);
        let mut builder = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = builder
            .send_json(&body)
            .map_err(|e| CallError::Transient(format!("{}: {e}", self.name)))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| CallError::Transient(format!("reading body: {e}")))?;
        match status {
            200..=299 => self.parse_response(&text),
            429 | 500..=599 => Err(CallError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(CallError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}
