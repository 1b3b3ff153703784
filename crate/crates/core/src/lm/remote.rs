//! HTTP client for a remote text-generation endpoint.
//!
//! Wire protocol: `POST {base}/v1/generate` with
//! `{"prompt", "temperature", "max_tokens", "seed"}`, answered by `200` and
//! `{"text": ...}`. Anything else is an endpoint error. Failed calls are
//! retried with exponential backoff; the number of requests in flight is
//! bounded by a counting gate shared between clones.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::GenerationParams;
use crate::error::{MapoError, Result};

pub const TOKEN_ENV: &str = "MAPO_ENDPOINT_TOKEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            timeout_secs: 60.0,
            max_attempts: 3,
            backoff_base_ms: 200,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

#[derive(Debug)]
struct Gate {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn acquire(self: &Arc<Self>) -> GateGuard {
        let mut free = self.slots.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        GateGuard(Arc::clone(self))
    }
}

struct GateGuard(Arc<Gate>);

impl Drop for GateGuard {
    fn drop(&mut self) {
        *self.0.slots.lock().expect("gate poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone, Debug)]
pub struct RemoteClient {
    config: RemoteConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
    gate: Arc<Gate>,
}

impl RemoteClient {
    /// Reads the bearer token from `MAPO_ENDPOINT_TOKEN` when set.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: RemoteConfig, token: Option<String>) -> Result<Self> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(MapoError::Config("max_attempts and max_in_flight must be positive".into()));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(MapoError::Config("timeout_secs must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| MapoError::Endpoint(e.to_string()))?;
        let gate = Arc::new(Gate {
            slots: Mutex::new(config.max_in_flight),
            freed: Condvar::new(),
        });
        Ok(Self {
            config,
            token,
            http,
            gate,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/generate", self.config.url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &GenerateRequest<'_>) -> Result<String> {
        let _slot = self.gate.acquire();
        let mut req = self.http.post(self.endpoint()).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| MapoError::Endpoint(e.to_string()))?;
        let status = resp.status();
        if status != reqwest::StatusCode::OK {
            return Err(MapoError::Endpoint(format!("status {status}")));
        }
        let bytes = resp.bytes().map_err(|e| MapoError::Endpoint(e.to_string()))?;
        let parsed: GenerateResponse = serde_json::from_slice(&bytes)
            .map_err(|e| MapoError::Endpoint(format!("malformed response body: {e}")))?;
        Ok(parsed.text)
    }

    pub fn generate_text(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        params.validate()?;
        let body = GenerateRequest {
            prompt,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
        };
        let mut last = None;
        for attempt in 0..self.config.max_attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("endpoint attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 < self.config.max_attempts {
                        thread::sleep(Duration::from_millis(self.config.backoff_base_ms << attempt));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
