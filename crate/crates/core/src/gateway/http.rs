//! Blocking chat-completions client.

use std::error::Error;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, CallError, FailureReason, InferenceConfig, Reply};
use crate::prompts::RenderedPrompt;

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

impl<'a> ChatRequest<'a> {
    pub(crate) fn new(config: &'a InferenceConfig, prompt: &'a str) -> Self {
        ChatRequest {
            model: &config.model_name,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: config.temperature,
            max_tokens: config.max_new_tokens,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Extracts the first choice's message content from a response body.
pub(crate) fn parse_response(body: &str) -> Result<String, FailureReason> {
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| FailureReason::ProtocolError {
        message: e.to_string(),
    })?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| FailureReason::ProtocolError {
            message: "response has no choices[0].message.content".into(),
        })
}

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Builds a client for `config.endpoint_url`. The bearer token, if any,
    /// is read once from the variable named by `config.api_key_env`.
    pub fn new(config: &InferenceConfig) -> Result<Self, String> {
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| "no endpoint_url configured".to_owned())?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(HttpBackend { agent, url, api_key })
    }
}

impl Backend for HttpBackend {
    fn call(&self, config: &InferenceConfig, prompt: &RenderedPrompt) -> Result<Reply, CallError> {
        let body = ChatRequest::new(config, &prompt.text);
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_string(&body).expect("request serializes");
        match req.send_string(&payload) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| {
                    CallError::retryable(FailureReason::Connection {
                        message: e.to_string(),
                    })
                })?;
                let content = parse_response(&text).map_err(CallError::fatal)?;
                Ok(Reply {
                    text: content,
                    latency: None,
                })
            }
            Err(ureq::Error::Status(status, _)) => Err(match status {
                429 => CallError::retryable(FailureReason::RateLimited),
                400..=499 => CallError::fatal(FailureReason::ClientError { status }),
                _ => CallError::retryable(FailureReason::ServerError { status }),
            }),
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                let timed_out = t
                    .source()
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .is_some_and(|e| matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock));
                Err(CallError::retryable(if timed_out || message.contains("timed out") {
                    FailureReason::Timeout
                } else {
                    FailureReason::Connection { message }
                }))
            }
        }
    }
}
