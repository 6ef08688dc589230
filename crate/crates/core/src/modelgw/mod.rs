//! Uniform access to language models.
//!
//! A [`Gateway`] wraps one [`Backend`] (the remote HTTP client or the local
//! simulator) and runs the "prompt `i` times" protocol: every request yields
//! exactly `n_samples` outputs or fails as a whole.

mod config;
mod remote;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskSpec;
use crate::perturb::derive_seed;
use crate::simlab::{SimBackend, SimError, SimModel};

pub use config::{BackendKind, GatewayConfig, DEFAULT_API_KEY_ENV};
pub use remote::{RemoteBackend, RetryPolicy};

pub const PLACEHOLDER: &str = "{x}";
pub const DEFAULT_N_SAMPLES: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt template error: {0}")]
    Template(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend refused to generate: {0}")]
    BackendRefusal(String),
    #[error("invalid generation request: {0}")]
    BadRequest(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Simulator(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_output_chars: usize,
    /// Base seed; output `j` uses a seed derived from it. Remote backends
    /// ignore it.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSet {
    pub sample_id: String,
    pub intensity: u32,
    pub outputs: Vec<String>,
    pub latency_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub latency_ms: u64,
}

/// One model behind the gateway.
#[async_trait]
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Produce one output per seed for the same prompt. Implementations
    /// either return all outputs or an error.
    async fn complete_batch(
        &self,
        prompt: &str,
        seeds: &[u64],
        temperature: f64,
        max_output_chars: usize,
    ) -> Result<Vec<Generation>, GatewayError>;
}

/// Substitute `input_x` for the single `{x}` placeholder of the task template.
pub fn build_prompt(task: &TaskSpec, input_x: &str) -> Result<String, GatewayError> {
    let template = &task.prompt_template;
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replacen(PLACEHOLDER, input_x, 1)),
        n => Err(GatewayError::Template(format!(
            "template must contain exactly one {PLACEHOLDER} placeholder, found {n}"
        ))),
    }
}

/// Split a template around its placeholder.
pub fn template_parts(template: &str) -> Option<(&str, &str)> {
    let (head, tail) = template.split_once(PLACEHOLDER)?;
    (!tail.contains(PLACEHOLDER)).then_some((head, tail))
}

fn truncate_chars(mut s: String, max_chars: usize) -> String {
    if let Some((idx, _)) = s.char_indices().nth(max_chars) {
        s.truncate(idx);
    }
    s
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    temperature: f64,
    calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, temperature: f64) -> Self {
        Gateway {
            backend,
            temperature,
            calls: AtomicU64::new(0),
        }
    }

    pub fn simulator(model: SimModel) -> Self {
        Self::new(Arc::new(SimBackend::new(model)), DEFAULT_TEMPERATURE)
    }

    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let backend: Arc<dyn Backend> = match config.backend {
            BackendKind::Simulator => {
                let path = config
                    .manifest
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("simulator backend needs a manifest path".into()))?;
                Arc::new(SimBackend::new(SimModel::load(path)?))
            }
            BackendKind::Remote => Arc::new(RemoteBackend::from_config(config)?),
        };
        Ok(Self::new(backend, config.temperature))
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Model calls issued so far (one per output).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub async fn generate(
        &self,
        sample_id: &str,
        intensity: u32,
        req: &GenerationRequest,
    ) -> Result<OutputSet, GatewayError> {
        if req.n_samples == 0 {
            return Err(GatewayError::BadRequest("n_samples must be at least 1".into()));
        }
        if !(req.temperature >= 0.0) {
            return Err(GatewayError::BadRequest("temperature must be non-negative".into()));
        }
        let seeds: Vec<u64> = (0..req.n_samples)
            .map(|j| derive_seed(req.seed, "output", j as u32))
            .collect();
        let started = Instant::now();
        let generations = self
            .backend
            .complete_batch(&req.prompt, &seeds, req.temperature, req.max_output_chars)
            .await?;
        self.calls.fetch_add(req.n_samples as u64, Ordering::Relaxed);
        if generations.len() != req.n_samples {
            return Err(GatewayError::BackendRefusal(format!(
                "expected {} outputs, backend returned {}",
                req.n_samples,
                generations.len()
            )));
        }
        tracing::debug!(sample_id, intensity, elapsed_ms = started.elapsed().as_millis() as u64, "output set complete");
        let (outputs, latency_ms) = generations
            .into_iter()
            .map(|g| (truncate_chars(g.text, req.max_output_chars), g.latency_ms))
            .unzip();
        Ok(OutputSet {
            sample_id: sample_id.to_string(),
            intensity,
            outputs,
            latency_ms,
        })
    }
}
