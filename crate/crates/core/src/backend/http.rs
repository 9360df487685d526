use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use super::wire::{
    FinetuneRequest, FinetuneResponse, GenerateRequest, GenerateResponse, HealthResponse,
    LabelRequest, LabelResponse,
};
use super::{Backend, BackendError, InFlightLimit, ModelHandle, RetryPolicy};

#[derive(Debug, Clone, Copy)]
pub struct HttpConfig {
    pub timeout: Duration,
    /// Fine-tuning can take much longer than a generation call.
    pub finetune_timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            finetune_timeout: Duration::from_secs(6 * 3600),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        }
    }
}

/// JSON-over-HTTP client for an external model server.
pub struct HttpBackend {
    base: String,
    agent: Agent,
    finetune_agent: Agent,
    config: HttpConfig,
    limit: InFlightLimit,
}

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::BadUri(u) => BackendError::Rejected(format!("bad URL {u}")),
        other => BackendError::Unavailable(other.to_string()),
    }
}

impl HttpBackend {
    pub fn new(base_url: &str, config: HttpConfig) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: agent(config.timeout),
            finetune_agent: agent(config.finetune_timeout),
            config,
            limit: InFlightLimit::new(config.max_in_flight),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn read<T: DeserializeOwned>(
        mut resp: ureq::http::Response<ureq::Body>,
    ) -> Result<T, BackendError> {
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { code: status, body });
        }
        serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("{e}: {body}")))
    }

    fn post<Q: Serialize, T: DeserializeOwned>(
        &self,
        agent: &Agent,
        path: &str,
        body: &Q,
    ) -> Result<T, BackendError> {
        let bytes = serde_json::to_vec(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let url = self.url(path);
        self.config.retry.run(|| {
            let _slot = self.limit.acquire();
            let resp = agent
                .post(&url)
                .header("content-type", "application/json")
                .send(&bytes[..])
                .map_err(transport_error)?;
            Self::read(resp)
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.base)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        let resp: GenerateResponse = self.post(&self.agent, "/v1/generate", req)?;
        if resp.completions.len() != req.num_samples as usize {
            return Err(BackendError::Protocol(format!(
                "expected {} completions, got {}",
                req.num_samples,
                resp.completions.len()
            )));
        }
        Ok(resp)
    }

    fn finetune(&self, req: &FinetuneRequest) -> Result<ModelHandle, BackendError> {
        let resp: FinetuneResponse = self.post(&self.finetune_agent, "/v1/finetune", req)?;
        Ok(resp.model_id)
    }

    fn label(&self, req: &LabelRequest) -> Result<String, BackendError> {
        let resp: LabelResponse = self.post(&self.agent, "/v1/label", req)?;
        Ok(resp.label)
    }

    fn health(&self) -> Result<(), BackendError> {
        let url = self.url("/v1/health");
        let resp: HealthResponse = self.config.retry.run(|| {
            let _slot = self.limit.acquire();
            let resp = self.agent.get(&url).call().map_err(transport_error)?;
            Self::read(resp)
        })?;
        if resp.ok {
            Ok(())
        } else {
            Err(BackendError::Unavailable("health check reported not ok".into()))
        }
    }
}
