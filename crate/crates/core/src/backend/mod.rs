//! Model backend gateway. The pipeline talks to a [`Backend`]; the HTTP
//! client forwards to an external model server and the stub answers locally.

pub mod http;
pub mod serve;
pub mod stub;
pub mod wire;

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use stub::{StubBackend, ValueGenerator};
pub use wire::{
    FinetuneExample, FinetuneHyper, FinetuneMode, FinetuneRequest, GenerateRequest,
    GenerateResponse, GenerationRole, LabelRequest,
};

/// Opaque handle for a fine-tuned model held by the backend.
pub type ModelHandle = String;

pub const BACKEND_URL_ENV: &str = "KOMT_BACKEND_URL";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend request timed out")]
    Timeout,
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("backend gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unavailable(_) | BackendError::Timeout => true,
            BackendError::Status { code, .. } => *code >= 500 || *code == 429,
            _ => false,
        }
    }

    /// True when the backend could not be reached at all.
    pub fn is_unreachable(&self) -> bool {
        match self {
            BackendError::Unavailable(_) | BackendError::Timeout => true,
            BackendError::Exhausted { last, .. } => last.is_unreachable(),
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
    fn finetune(&self, req: &FinetuneRequest) -> Result<ModelHandle, BackendError>;
    fn label(&self, req: &LabelRequest) -> Result<String, BackendError>;
    fn health(&self) -> Result<(), BackendError>;
    fn release(&self, _model: &ModelHandle) {}
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        (**self).generate(req)
    }
    fn finetune(&self, req: &FinetuneRequest) -> Result<ModelHandle, BackendError> {
        (**self).finetune(req)
    }
    fn label(&self, req: &LabelRequest) -> Result<String, BackendError> {
        (**self).label(req)
    }
    fn health(&self) -> Result<(), BackendError> {
        (**self).health()
    }
    fn release(&self, model: &ModelHandle) {
        (**self).release(model)
    }
}

/// Retries a failed call at most `max_retries` times after the first attempt,
/// with exponential backoff. Sleeping stops once `max_total_wait` would be
/// exceeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_total_wait: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            multiplier: 2.0,
            max_total_wait: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempts = 0u32;
        let mut waited = Duration::ZERO;
        let mut backoff = self.initial_backoff;
        loop {
            attempts += 1;
            let err = match call() {
                Ok(v) => return Ok(v),
                Err(e) => e,
            };
            if !err.is_retryable() {
                return Err(err);
            }
            if attempts > self.max_retries || waited + backoff > self.max_total_wait {
                return Err(BackendError::Exhausted {
                    attempts,
                    last: Box::new(err),
                });
            }
            log::warn!("backend call failed ({err}); retrying in {backoff:?}");
            thread::sleep(backoff);
            waited += backoff;
            backoff = backoff.mul_f64(self.multiplier);
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut cur = self.current.lock().unwrap_or_else(|e| e.into_inner());
        while *cur >= self.max {
            cur = self.freed.wait(cur).unwrap_or_else(|e| e.into_inner());
        }
        *cur += 1;
        InFlightGuard(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut cur = self.0.current.lock().unwrap_or_else(|e| e.into_inner());
        *cur -= 1;
        self.0.freed.notify_one();
    }
}

/// Builds a backend from a CLI-style spec: `stub`, `stub:<seed>` or an
/// `http(s)://` base URL.
pub fn from_spec(spec: &str, config: HttpConfig) -> Result<Box<dyn Backend>, BackendError> {
    if spec == "stub" {
        return Ok(Box::new(StubBackend::new(0)));
    }
    if let Some(seed) = spec.strip_prefix("stub:") {
        let seed = seed
            .parse()
            .map_err(|_| BackendError::Rejected(format!("bad stub seed {seed:?}")))?;
        return Ok(Box::new(StubBackend::new(seed)));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(HttpBackend::new(spec, config)));
    }
    Err(BackendError::Rejected(format!("unknown backend {spec:?}")))
}
