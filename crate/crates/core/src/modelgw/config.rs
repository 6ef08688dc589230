use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GatewayError, DEFAULT_TEMPERATURE};

pub const DEFAULT_API_KEY_ENV: &str = "PEARL_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Simulator,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "simulator" => Ok(BackendKind::Simulator),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

/// Gateway settings, usually the `[gateway]` table of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    /// Full chat-completions endpoint, e.g. `https://host/v1/chat/completions`.
    pub url: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub request_timeout_secs: u64,
    /// JSONL log of every remote request and response, keys redacted.
    pub audit_log: Option<PathBuf>,
    /// Simulator manifest written by `simlab plant`.
    pub manifest: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Simulator,
            url: None,
            model: None,
            temperature: DEFAULT_TEMPERATURE,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_in_flight: 8,
            requests_per_minute: None,
            max_retries: 5,
            initial_backoff_ms: 500,
            request_timeout_secs: 120,
            audit_log: None,
            manifest: None,
        }
    }
}

impl GatewayConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}
