//! Clients for the two model roles: the knowledge module and the answering model.
//!
//! Every backend speaks one completion protocol (see [`http`]) or is an
//! offline [`stub`]. A [`Backend`] handle layers a persistent response cache,
//! a shared rate limiter and bounded retries over its transport, and is
//! cheap to share across threads.

pub mod cache;
pub mod http;
pub mod limiter;
pub mod stub;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::HttpTransport;
pub use limiter::RateLimiter;
pub use stub::{stub_backend, StubReply, StubTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendRole {
    PkgModule,
    BlackBoxLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub role: BackendRole,
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Requests per second.
    pub rate_limit: f64,
}

impl BackendDescriptor {
    pub fn new(role: BackendRole, endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendDescriptor {
            role,
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            rate_limit: 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout.is_zero() {
            return Err(BackendError::InvalidConfig("timeout must be positive".into()));
        }
        if !self.rate_limit.is_finite() || self.rate_limit <= 0.0 {
            return Err(BackendError::InvalidConfig(format!(
                "rate_limit must be a positive number, got {}",
                self.rate_limit
            )));
        }
        if self.model_name.is_empty() {
            return Err(BackendError::InvalidConfig("model_name must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl GenerationRequest {
    /// Greedy request with no stop sequences.
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency: Duration,
    pub cached: bool,
}

/// What a transport returns for a successful attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Outcome of a single failed attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    Timeout,
    Status { code: u16, body: String },
    Malformed(String),
    Transport(String),
}

impl AttemptError {
    /// Timeouts, 429 and 5xx are worth retrying; other client errors are deterministic.
    pub fn is_retryable(&self) -> bool {
        match self {
            AttemptError::Timeout => true,
            AttemptError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            AttemptError::Malformed(_) | AttemptError::Transport(_) => false,
        }
    }

    fn into_error(self, attempts: u32) -> BackendError {
        match self {
            AttemptError::Timeout => BackendError::Timeout { attempts },
            AttemptError::Status { code: 429, .. } => BackendError::RateLimited { attempts },
            AttemptError::Status { code, body } => BackendError::TransportFailure {
                attempts,
                reason: format!("HTTP {code}: {body}"),
            },
            AttemptError::Malformed(reason) => BackendError::MalformedResponse { attempts, reason },
            AttemptError::Transport(reason) => BackendError::TransportFailure { attempts, reason },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed response after {attempts} attempt(s): {reason}")]
    MalformedResponse { attempts: u32, reason: String },
    #[error("transport failure after {attempts} attempt(s): {reason}")]
    TransportFailure { attempts: u32, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("cache failure: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Timeout { attempts }
            | BackendError::RateLimited { attempts }
            | BackendError::MalformedResponse { attempts, .. }
            | BackendError::TransportFailure { attempts, .. } => *attempts,
            _ => 0,
        }
    }
}

/// Sends one request attempt. Implementations must honor `descriptor.timeout`.
pub trait Transport: Send + Sync {
    fn send(&self, descriptor: &BackendDescriptor, request: &GenerationRequest) -> Result<WireResponse, AttemptError>;
}

/// Exponential backoff between retries: `base * 2^(attempt-1)`, capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(200),
            cap: Duration::from_secs(5),
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// 32-byte cache key over length-prefixed `(model, prompt, max_tokens, temperature, stop)`.
pub fn cache_key(model_name: &str, request: &GenerationRequest) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(model_name.as_bytes());
    field(request.prompt.as_bytes());
    field(&request.max_tokens.to_le_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    field(&(request.stop.len() as u64).to_le_bytes());
    for s in &request.stop {
        field(s.as_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Default)]
struct Counters {
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackendStats {
    pub network_calls: u64,
    pub cache_hits: u64,
}

/// Shareable handle over a transport with caching, rate limiting and retries.
#[derive(Clone)]
pub struct Backend {
    descriptor: BackendDescriptor,
    transport: Arc<dyn Transport>,
    cache: Option<Arc<ResponseCache>>,
    limiter: Arc<RateLimiter>,
    backoff: Backoff,
    counters: Arc<Counters>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("descriptor", &self.descriptor)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Backend {
    pub fn new(descriptor: BackendDescriptor, transport: Arc<dyn Transport>) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let limiter = Arc::new(RateLimiter::new(descriptor.rate_limit));
        Ok(Backend {
            descriptor,
            transport,
            cache: None,
            limiter,
            backoff: Backoff::default(),
            counters: Arc::default(),
        })
    }

    /// Backend speaking the HTTP completion protocol at `descriptor.endpoint_url`.
    pub fn http(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        let transport = HttpTransport::new(&descriptor);
        Self::new(descriptor, Arc::new(transport))
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn stats(&self) -> BackendStats {
        BackendStats {
            network_calls: self.counters.network_calls.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
        }
    }

    /// Cache lookup, then rate-limited attempts with backoff until success,
    /// a non-retryable failure, exhausted retries, or the overall time budget
    /// of `timeout * (max_retries + 1)`.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        let key = cache_key(&self.descriptor.model_name, request);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(GenerationResponse { cached: true, ..hit });
        }

        let budget = self.descriptor.timeout.saturating_mul(self.descriptor.max_retries + 1);
        let started = Instant::now();
        let mut attempts = 0u32;
        loop {
            self.limiter.acquire();
            attempts += 1;
            self.counters.network_calls.fetch_add(1, Ordering::Relaxed);
            let t0 = Instant::now();
            match self.transport.send(&self.descriptor, request) {
                Ok(wire) => {
                    let response = GenerationResponse {
                        text: wire.text,
                        prompt_tokens: wire.prompt_tokens,
                        completion_tokens: wire.completion_tokens,
                        latency: t0.elapsed(),
                        cached: false,
                    };
                    if let Some(cache) = &self.cache {
                        cache.insert(key, &response).map_err(|e| BackendError::Cache(e.to_string()))?;
                    }
                    return Ok(response);
                }
                Err(e) => {
                    let delay = self.backoff.delay(attempts);
                    let out_of_budget = started.elapsed() + delay > budget;
                    if !e.is_retryable() || attempts > self.descriptor.max_retries || out_of_budget {
                        return Err(e.into_error(attempts));
                    }
                    thread::sleep(delay);
                }
            }
        }
    }

    /// Runs `requests` with at most `max_in_flight` outstanding; results keep input order.
    pub fn generate_batch(
        &self,
        requests: &[GenerationRequest],
        max_in_flight: usize,
    ) -> Vec<Result<GenerationResponse, BackendError>> {
        parallel_map(requests, max_in_flight, |_, r| self.generate(r))
    }
}

/// Applies `f` to every item on up to `workers` threads, returning results in input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
