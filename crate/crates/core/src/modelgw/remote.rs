//! Chat-completions HTTP backend.
//!
//! Each output is one POST `{model, messages, temperature, max_tokens}`.
//! Calls share an in-flight cap and an optional requests-per-minute budget;
//! throttling and server errors are retried with jittered exponential
//! backoff.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use futures::future::try_join_all;
use rand::Rng;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{Backend, BackendKind, Gateway, GatewayConfig, GatewayError, Generation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), jittered by ±50%.
    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.initial_backoff.saturating_mul(1u32 << attempt.min(16));
        let jitter: f64 = rand::rng().random_range(0.5..1.5);
        base.mul_f64(jitter)
    }
}

enum Attempt {
    Done(String),
    Retry(GatewayError),
    Fail(GatewayError),
}

pub struct RemoteBackend {
    client: reqwest::Client,
    url: String,
    model: String,
    api_key: String,
    retry: RetryPolicy,
    in_flight: Semaphore,
    min_interval: Option<Duration>,
    next_slot: Mutex<Instant>,
    audit: Option<Mutex<File>>,
}

impl RemoteBackend {
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let url = config
            .url
            .clone()
            .ok_or_else(|| GatewayError::Config("remote backend needs a url".into()))?;
        let model = config
            .model
            .clone()
            .ok_or_else(|| GatewayError::Config("remote backend needs a model name".into()))?;
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Config(format!("audit log {}: {e}", path.display())))?,
            )),
            None => None,
        };
        Ok(RemoteBackend {
            client,
            url,
            model,
            api_key,
            retry: RetryPolicy {
                max_retries: config.max_retries,
                initial_backoff: Duration::from_millis(config.initial_backoff_ms),
            },
            in_flight: Semaphore::new(config.max_in_flight.max(1)),
            min_interval: config
                .requests_per_minute
                .filter(|&r| r > 0)
                .map(|r| Duration::from_secs_f64(60.0 / r as f64)),
            next_slot: Mutex::new(Instant::now()),
            audit,
        })
    }

    pub fn into_gateway(self, temperature: f64) -> Gateway {
        Gateway::new(std::sync::Arc::new(self), temperature)
    }

    async fn throttle(&self) {
        let Some(interval) = self.min_interval else { return };
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let slot = (*next).max(Instant::now());
            *next = slot + interval;
            slot
        };
        tokio::time::sleep_until(slot.into()).await;
    }

    fn redact(&self, text: &str) -> String {
        if self.api_key.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.api_key, "[REDACTED]")
        }
    }

    fn audit(&self, entry: Value) {
        let Some(log) = &self.audit else { return };
        let line = self.redact(&entry.to_string());
        let mut f = log.lock().expect("audit log lock");
        if let Err(e) = writeln!(f, "{line}") {
            tracing::warn!("audit log write failed: {e}");
        }
    }

    async fn attempt(&self, body: &Value, attempt: u32) -> Attempt {
        self.throttle().await;
        let started = Instant::now();
        let sent = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await;
        let ts_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let (status, text) = match sent {
            Ok(resp) => {
                let status = resp.status();
                match resp.text().await {
                    Ok(text) => (status, text),
                    Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
                }
            }
            Err(e) => {
                self.audit(json!({
                    "ts_ms": ts_ms, "url": self.url, "attempt": attempt,
                    "authorization": "Bearer [REDACTED]", "request": body,
                    "error": e.to_string(),
                }));
                return Attempt::Retry(GatewayError::Transport(e.to_string()));
            }
        };
        self.audit(json!({
            "ts_ms": ts_ms, "url": self.url, "attempt": attempt,
            "authorization": "Bearer [REDACTED]", "request": body,
            "status": status.as_u16(), "latency_ms": started.elapsed().as_millis() as u64,
            "response": text,
        }));
        match status {
            s if s.is_success() => match extract_text(&text) {
                Ok(out) => Attempt::Done(out),
                Err(e) => Attempt::Fail(e),
            },
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Fail(GatewayError::Auth(format!("HTTP {status}")))
            }
            StatusCode::TOO_MANY_REQUESTS => Attempt::Retry(GatewayError::RateLimited { attempts: attempt + 1 }),
            s if s.is_server_error() || s == StatusCode::REQUEST_TIMEOUT => {
                Attempt::Retry(GatewayError::Transport(format!("HTTP {status}")))
            }
            s => Attempt::Fail(GatewayError::BackendRefusal(format!("HTTP {s}: {}", self.redact(&text)))),
        }
    }

    async fn complete_one(&self, prompt: &str, temperature: f64, max_output_chars: usize) -> Result<Generation, GatewayError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_output_chars.div_ceil(3).max(1),
        });
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            match self.attempt(&body, attempt).await {
                Attempt::Done(text) => {
                    return Ok(Generation {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.retry.max_retries => {
                    return Err(match e {
                        GatewayError::RateLimited { .. } => GatewayError::RateLimited { attempts: attempt + 1 },
                        other => other,
                    })
                }
                Attempt::Retry(e) => {
                    let delay = self.retry.backoff(attempt);
                    tracing::warn!(attempt, ?delay, "retrying remote call: {e}");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        }
    }
}

/// Pull the generated text out of a chat-completions (or legacy
/// completions) response body.
fn extract_text(body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::BackendRefusal(format!("response is not JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::BackendRefusal("response has no choices".into()))?;
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(GatewayError::BackendRefusal("content filtered".into()));
    }
    if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
        return Err(GatewayError::BackendRefusal(refusal.to_string()));
    }
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::BackendRefusal("choice carries no text".into()))
}

#[async_trait]
impl Backend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    async fn complete_batch(
        &self,
        prompt: &str,
        seeds: &[u64],
        temperature: f64,
        max_output_chars: usize,
    ) -> Result<Vec<Generation>, GatewayError> {
        try_join_all(seeds.iter().map(|_| self.complete_one(prompt, temperature, max_output_chars))).await
    }
}
