//! Chat-completions client with pacing, retries, a reply cache, and
//! deterministic offline backends.

pub mod cache;
pub mod ratelimit;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::prompt::PromptBundle;
pub use cache::{CacheError, ResponseCache};
pub use ratelimit::{Backoff, Clock, RateLimiter, SystemClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Live,
    Replay,
    Oracle,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Live => "live",
            Backend::Replay => "replay",
            Backend::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(Backend::Live),
            "replay" => Ok(Backend::Replay),
            "oracle" => Ok(Backend::Oracle),
            _ => Err(GatewayError::InvalidConfig(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    pub backend: Backend,
    pub api_key_env_name: String,
    /// Sent as `image_url.detail` when set; otherwise the endpoint default
    /// applies.
    pub image_detail: Option<String>,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4-vision-preview".into(),
            temperature: 0.1,
            max_retries: 5,
            requests_per_minute: 60,
            timeout_secs: 120,
            backend: Backend::Live,
            api_key_env_name: "OPENAI_API_KEY".into(),
            image_detail: None,
            backoff_base_ms: 2_000,
            backoff_cap_ms: 60_000,
        }
    }
}

impl GatewayConfig {
    /// Every violated constraint, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=2.0).contains(&self.temperature) {
            out.push(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.requests_per_minute < 1 {
            out.push("requests_per_minute must be at least 1".into());
        }
        if self.timeout_secs == 0 {
            out.push("timeout_secs must be positive".into());
        }
        if self.model_name.trim().is_empty() {
            out.push("model_name is empty".into());
        }
        if self.backend == Backend::Live && self.endpoint_url.trim().is_empty() {
            out.push("endpoint_url is empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GatewayError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn backoff(&self) -> Backoff {
        Backoff {
            base: Duration::from_millis(self.backoff_base_ms),
            cap: Duration::from_millis(self.backoff_cap_ms),
        }
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReply {
    pub text: String,
    pub request_hash: String,
    pub backend_used: Backend,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("rate limited on all {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("transport failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("no cached reply for request {0}")]
    CacheMiss(String),
    #[error("oracle has no reply for target {0}")]
    OracleUndefined(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    IoFailure(#[from] CacheError),
}

/// Deterministic reply source for offline runs. Receives the interleaved
/// shots as `(tile_id, label)` pairs and the target tile id.
pub trait ReplyOracle: Send + Sync {
    fn reply(&self, shots: &[(String, String)], target_tile_id: &str) -> Option<String>;
}

/// Always answers with the same text.
#[derive(Debug, Clone)]
pub struct FixedOracle(pub String);

impl ReplyOracle for FixedOracle {
    fn reply(&self, _shots: &[(String, String)], _target: &str) -> Option<String> {
        Some(self.0.clone())
    }
}

pub struct Gateway {
    config: GatewayConfig,
    cache: Option<ResponseCache>,
    oracle: Option<Arc<dyn ReplyOracle>>,
    limiter: RateLimiter,
    client: OnceLock<reqwest::blocking::Client>,
    jitter: Mutex<ChaCha8Rng>,
    network_calls: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("cache", &self.cache)
            .field("network_calls", &self.network_calls())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        Self::with_clock(config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(config: GatewayConfig, clock: Arc<dyn Clock>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Gateway {
            limiter: RateLimiter::new(config.requests_per_minute, clock),
            config,
            cache: None,
            oracle: None,
            client: OnceLock::new(),
            jitter: Mutex::new(ChaCha8Rng::from_os_rng()),
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_oracle(mut self, oracle: Arc<dyn ReplyOracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Request hash `complete` would use for this bundle.
    pub fn request_hash(&self, bundle: &PromptBundle, requery: u32) -> String {
        let request = wire::build_request(bundle, &self.config);
        wire::request_hash(&wire::canonical_request(&request, requery))
    }

    pub fn cache_put(&self, reply: &RawReply, canonical_request: &Value) -> Result<bool, GatewayError> {
        match &self.cache {
            Some(c) => Ok(c.put(reply, canonical_request)?),
            None => Ok(false),
        }
    }

    pub fn cache_get(&self, request_hash: &str) -> Result<Option<RawReply>, GatewayError> {
        match &self.cache {
            Some(c) => Ok(c.get(request_hash)?),
            None => Ok(None),
        }
    }

    /// Obtains a reply for `bundle`. `requery` distinguishes deliberate
    /// repeat queries of an otherwise identical request.
    pub fn complete(&self, bundle: &PromptBundle, requery: u32) -> Result<RawReply, GatewayError> {
        let request = wire::build_request(bundle, &self.config);
        let canonical = wire::canonical_request(&request, requery);
        let hash = wire::request_hash(&canonical);

        match self.config.backend {
            Backend::Replay => {
                let mut hit = self.cache_get(&hash)?.ok_or(GatewayError::CacheMiss(hash))?;
                hit.backend_used = Backend::Replay;
                hit.attempt_count = 1;
                Ok(hit)
            }
            Backend::Oracle => {
                let oracle = self
                    .oracle
                    .as_ref()
                    .ok_or_else(|| GatewayError::OracleUndefined(bundle.target_tile_id.clone()))?;
                let text = oracle
                    .reply(&bundle.shots, &bundle.target_tile_id)
                    .ok_or_else(|| GatewayError::OracleUndefined(bundle.target_tile_id.clone()))?;
                let reply = RawReply {
                    text,
                    request_hash: hash,
                    backend_used: Backend::Oracle,
                    latency_ms: 0,
                    attempt_count: 1,
                };
                self.cache_put(&reply, &canonical)?;
                Ok(reply)
            }
            Backend::Live => {
                // Completed requests are never re-issued.
                if let Some(mut hit) = self.cache_get(&hash)? {
                    hit.backend_used = Backend::Replay;
                    return Ok(hit);
                }
                let reply = self.send_with_retries(&request, hash)?;
                self.cache_put(&reply, &canonical)?;
                Ok(reply)
            }
        }
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, GatewayError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let built = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport {
                status: None,
                message: e.to_string(),
            })?;
        Ok(self.client.get_or_init(|| built))
    }

    fn send_with_retries(&self, request: &Value, hash: String) -> Result<RawReply, GatewayError> {
        let key_name = &self.config.api_key_env_name;
        let api_key = std::env::var(key_name).map_err(|_| GatewayError::MissingApiKey(key_name.clone()))?;
        let client = self.client()?;
        let url = self.config.completions_url();
        let backoff = self.config.backoff();
        let mut rate_limited_every_time = true;
        let mut last_failure = None;
        let started = Instant::now();

        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = {
                    let mut rng = self.jitter.lock().unwrap_or_else(|e| e.into_inner());
                    backoff.delay(attempt - 1, &mut *rng)
                };
                log::debug!("retrying {hash} in {delay:?} (attempt {})", attempt + 1);
                std::thread::sleep(delay);
            }
            self.limiter.acquire();
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let result = client
                .post(&url)
                .bearer_auth(&api_key)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(request.to_string())
                .send();
            let response = match result {
                Ok(r) => r,
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    rate_limited_every_time = false;
                    last_failure = Some(GatewayError::Transport {
                        status: None,
                        message: e.to_string(),
                    });
                    continue;
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        status: None,
                        message: e.to_string(),
                    })
                }
            };
            let status = response.status();
            if status.is_success() {
                let body: Value = response
                    .bytes()
                    .map_err(|e| e.to_string())
                    .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
                    .map_err(|e| GatewayError::Transport {
                    status: Some(status.as_u16()),
                    message: format!("unreadable response body: {e}"),
                })?;
                let text = wire::reply_text(&body).ok_or_else(|| GatewayError::Transport {
                    status: Some(status.as_u16()),
                    message: "response has no choices[0].message.content".into(),
                })?;
                return Ok(RawReply {
                    text,
                    request_hash: hash,
                    backend_used: Backend::Live,
                    latency_ms: u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX),
                    attempt_count: attempt + 1,
                });
            }
            let body = response.text().unwrap_or_default();
            let failure = GatewayError::Transport {
                status: Some(status.as_u16()),
                message: body.chars().take(500).collect(),
            };
            if status.as_u16() == 429 {
                last_failure = Some(failure);
            } else if status.is_server_error() {
                rate_limited_every_time = false;
                last_failure = Some(failure);
            } else {
                return Err(failure);
            }
        }
        let attempts = self.config.max_retries + 1;
        if rate_limited_every_time {
            Err(GatewayError::RateLimitedExhausted { attempts })
        } else {
            Err(last_failure.unwrap_or(GatewayError::Transport {
                status: None,
                message: format!("gave up after {attempts} attempts"),
            }))
        }
    }
}
