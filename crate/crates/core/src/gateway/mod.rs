//! Language-vision model access: request/response types, retrying gateway,
//! mock oracle, record/replay cassettes and HTTP dialects.

mod cassette;
mod http;
mod mock;
mod verdict;

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompt::PromptBundle;

pub use cassette::{Cassette, CassetteEntry, RecordingBackend, ReplayBackend, CASSETTE_MAGIC};
pub use http::{Dialect, HttpBackend, HttpConfig};
pub use mock::{mock_outcome, mock_respond, MockBackend, MockOracleParams};
pub use verdict::parse_verdict;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("no cassette entry for request hash {hash}")]
    ReplayMiss { hash: String },
    #[error("cassette error: {0}")]
    Cassette(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LvmRequest {
    pub bundle: PromptBundle,
    pub backend: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: u64,
}

impl LvmRequest {
    pub fn new(bundle: PromptBundle, backend: impl Into<String>) -> Self {
        LvmRequest {
            bundle,
            backend: backend.into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_s: 120,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LvmOutcome {
    Text(String),
    Refusal(String),
    TransportError(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LvmResponse {
    pub outcome: LvmOutcome,
    pub latency_ms: u64,
    pub backend_id: String,
    pub exchange_hash: String,
}

/// Content hash of everything the model sees: temperature, text, images.
pub fn exchange_hash(req: &LvmRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"occ-exchange/1\0");
    h.update(req.temperature.to_le_bytes());
    h.update((req.bundle.text.len() as u64).to_le_bytes());
    h.update(req.bundle.text.as_bytes());
    h.update((req.bundle.images.len() as u64).to_le_bytes());
    for img in &req.bundle.images {
        h.update((img.len() as u64).to_le_bytes());
        h.update(img);
    }
    hex::encode(h.finalize())
}

/// One model service. Transport errors are retried by [`Gateway`]; any other
/// error aborts the request.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, req: &LvmRequest, hash: &str) -> Result<LvmOutcome, GatewayError>;
    /// Live backends go through the in-flight limiter.
    fn is_live(&self) -> bool {
        false
    }
}

/// Counting semaphore capping in-flight live requests.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Sleep before retry `k` (0-based); the last entry repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct Backoff {
    pub delays: Vec<Duration>,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            delays: vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4),
            ],
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Backoff { delays: vec![] }
    }

    pub fn delay(&self, retry: usize) -> Duration {
        self.delays
            .get(retry)
            .or(self.delays.last())
            .copied()
            .unwrap_or(Duration::ZERO)
    }
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    backoff: Backoff,
    limiter: Arc<Limiter>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("backoff", &self.backoff)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            backoff: Backoff::default(),
            limiter: Arc::new(Limiter::new(DEFAULT_MAX_IN_FLIGHT)),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Arc::new(Limiter::new(n));
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    /// Dispatches with retry on transport errors. Exhausted retries come back
    /// as a `TransportError` outcome; auth, config and replay errors are
    /// returned as `Err`.
    pub fn send(&self, req: &LvmRequest) -> Result<LvmResponse, GatewayError> {
        req.validate()?;
        let hash = exchange_hash(req);
        let start = Instant::now();
        let mut retry = 0usize;
        let outcome = loop {
            let result = if self.backend.is_live() {
                let _permit = self.limiter.acquire();
                self.backend.call(req, &hash)
            } else {
                self.backend.call(req, &hash)
            };
            match result {
                Ok(outcome) => break outcome,
                Err(GatewayError::Transport(msg)) => {
                    if retry >= req.max_retries as usize {
                        break LvmOutcome::TransportError(msg);
                    }
                    std::thread::sleep(self.backoff.delay(retry));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        };
        Ok(LvmResponse {
            outcome,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.backend.id().to_string(),
            exchange_hash: hash,
        })
    }
}
