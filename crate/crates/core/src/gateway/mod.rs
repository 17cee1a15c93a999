//! Dispatch of rendered prompts to a chat-completions endpoint.
//!
//! A [`Gateway`] wraps a [`Backend`] (HTTP or mock) with the client-side
//! context-length check, retry/backoff policy and a bounded pool of
//! in-flight requests. Every dispatched prompt yields exactly one
//! [`ModelOutput`]; transport problems are recorded in the output instead of
//! being returned as errors.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::{FailPattern, MockBackend, MockPolicy, ScoreMap};

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LangPair;
use crate::prompts::{RenderedPrompt, TemplateId};

/// Context window used for zero-shot prompts when none is configured.
pub const ZERO_SHOT_CONTEXT_TOKENS: u32 = 1024;
/// Context window used for in-context prompts when none is configured.
pub const ICL_CONTEXT_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Full URL of the chat-completions route, e.g.
    /// `http://localhost:8000/v1/chat/completions`.
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    /// Overrides the per-template default (1024 zero-shot, 4096 ICL).
    pub max_context_tokens: Option<u32>,
    pub max_new_tokens: u32,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First backoff delay; doubles on each retry.
    pub retry_base_delay_ms: u64,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            endpoint_url: None,
            model_name: "mock".into(),
            temperature: 0.0,
            max_context_tokens: None,
            max_new_tokens: 64,
            request_timeout_ms: 120_000,
            max_retries: 3,
            max_in_flight: 8,
            retry_base_delay_ms: 1000,
            api_key_env: "QE_API_KEY".into(),
        }
    }
}

impl InferenceConfig {
    pub fn context_limit(&self, template: TemplateId) -> u32 {
        self.max_context_tokens.unwrap_or(if template.is_icl() {
            ICL_CONTEXT_TOKENS
        } else {
            ZERO_SHOT_CONTEXT_TOKENS
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_new_tokens == 0 || self.max_in_flight == 0 {
            return Err("max_new_tokens and max_in_flight must be positive".into());
        }
        if self.max_context_tokens == Some(0) {
            return Err("max_context_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Identifies the prompt an output belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptRef {
    pub pair: LangPair,
    pub segment_id: u64,
    pub template: TemplateId,
    pub seed: u64,
}

impl From<&RenderedPrompt> for PromptRef {
    fn from(p: &RenderedPrompt) -> Self {
        PromptRef {
            pair: p.pair.clone(),
            segment_id: p.target_segment_id,
            template: p.template,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureReason {
    ServerError { status: u16 },
    ClientError { status: u16 },
    RateLimited,
    Timeout,
    Connection { message: String },
    ProtocolError { message: String },
    ContextOverflow { estimated: usize, limit: u32 },
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::ServerError { status } => write!(f, "server error (HTTP {status})"),
            FailureReason::ClientError { status } => write!(f, "client error (HTTP {status})"),
            FailureReason::RateLimited => f.write_str("rate limited"),
            FailureReason::Timeout => f.write_str("timed out"),
            FailureReason::Connection { message } => write!(f, "connection failed: {message}"),
            FailureReason::ProtocolError { message } => write!(f, "malformed response: {message}"),
            FailureReason::ContextOverflow { estimated, limit } => {
                write!(f, "prompt needs ~{estimated} tokens, context is {limit}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TransportStatus {
    Ok,
    Failed { reason: FailureReason },
}

impl TransportStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, TransportStatus::Ok)
    }
}

/// Raw result of one dispatched prompt; serialized as one line of
/// `outputs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub prompt_ref: PromptRef,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub status: TransportStatus,
}

/// A backend call that did not produce text.
#[derive(Debug, Clone, PartialEq)]
pub struct CallError {
    pub reason: FailureReason,
    pub retryable: bool,
}

impl CallError {
    pub fn retryable(reason: FailureReason) -> Self {
        CallError { reason, retryable: true }
    }

    pub fn fatal(reason: FailureReason) -> Self {
        CallError { reason, retryable: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub text: String,
    /// Backends that simulate latency report it here so repeated runs stay
    /// byte-identical; real backends leave it empty and wall time is used.
    pub latency: Option<Duration>,
}

/// One request/response exchange with a model server.
pub trait Backend: Send + Sync {
    fn call(&self, config: &InferenceConfig, prompt: &RenderedPrompt) -> Result<Reply, CallError>;
}

/// Token counter used for the pre-dispatch context check.
pub trait TokenCounter: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// ⌈chars / 3⌉, the estimate used when no tokenizer is configured.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(3)
}

pub struct Gateway {
    config: InferenceConfig,
    backend: Arc<dyn Backend>,
    counter: Option<Arc<dyn TokenCounter>>,
}

impl Gateway {
    pub fn new(config: InferenceConfig, backend: Arc<dyn Backend>) -> Self {
        Gateway {
            config,
            backend,
            counter: None,
        }
    }

    /// Uses an exact tokenizer for the context check instead of the
    /// character estimate.
    pub fn with_token_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.retry_base_delay_ms as f64 * 2f64.powi(retry as i32);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        Duration::from_secs_f64(base * jitter / 1000.0)
    }

    /// Sends one prompt, retrying retryable failures up to `max_retries`
    /// times with jittered exponential backoff.
    pub fn complete(&self, prompt: &RenderedPrompt) -> ModelOutput {
        let prompt_ref = PromptRef::from(prompt);
        let limit = self.config.context_limit(prompt.template);
        let estimated = match &self.counter {
            Some(c) => c.count_tokens(&prompt.text),
            None => estimate_tokens(&prompt.text),
        };
        if estimated > limit as usize {
            return ModelOutput {
                prompt_ref,
                raw_text: String::new(),
                latency_ms: 0,
                attempts: 0,
                status: TransportStatus::Failed {
                    reason: FailureReason::ContextOverflow { estimated, limit },
                },
            };
        }

        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.backend.call(&self.config, prompt) {
                Ok(reply) => {
                    let latency = reply.latency.unwrap_or_else(|| started.elapsed());
                    return ModelOutput {
                        prompt_ref,
                        raw_text: reply.text,
                        latency_ms: latency.as_millis() as u64,
                        attempts,
                        status: TransportStatus::Ok,
                    };
                }
                Err(err) if err.retryable && attempts <= self.config.max_retries => {
                    log::debug!(
                        "{} segment {}: attempt {attempts} failed ({}), retrying",
                        prompt_ref.pair,
                        prompt_ref.segment_id,
                        err.reason
                    );
                    std::thread::sleep(self.backoff(attempts - 1));
                }
                Err(err) => {
                    return ModelOutput {
                        prompt_ref,
                        raw_text: String::new(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts,
                        status: TransportStatus::Failed { reason: err.reason },
                    };
                }
            }
        }
    }

    /// Sends a batch with at most `max_in_flight` requests outstanding.
    /// Prompts are admitted in input order and outputs come back in input
    /// order; failures never abort the batch.
    pub fn complete_batch(&self, prompts: &[RenderedPrompt]) -> Vec<ModelOutput> {
        if prompts.is_empty() {
            return Vec::new();
        }
        let workers = self.config.max_in_flight.clamp(1, prompts.len());
        let next = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let mut slots: Vec<Option<ModelOutput>> = vec![None; prompts.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut local = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= prompts.len() {
                                break;
                            }
                            local.push((i, self.complete(&prompts[i])));
                            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                            if n.is_multiple_of(100) {
                                log::info!("{n}/{} prompts completed", prompts.len());
                            }
                        }
                        local
                    })
                })
                .collect();
            for h in handles {
                for (i, out) in h.join().expect("gateway worker panicked") {
                    slots[i] = Some(out);
                }
            }
        });
        slots
            .into_iter()
            .map(|o| o.expect("every prompt was dispatched"))
            .collect()
    }
}
