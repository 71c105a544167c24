use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, GenRequest, GenResponse, GeneratorBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{base_url}/generate`.
    pub base_url: String,
    pub timeout_seconds: u64,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

impl RemoteConfig {
    /// Reads `APPFORGE_REMOTE_URL`, `APPFORGE_REMOTE_TIMEOUT` and
    /// `APPFORGE_REMOTE_RETRIES`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base_url = std::env::var("APPFORGE_REMOTE_URL")
            .map_err(|_| BackendError::Transport("APPFORGE_REMOTE_URL is not set".into()))?;
        let num = |name: &str, default: u64| -> Result<u64, BackendError> {
            match std::env::var(name) {
                Ok(v) => v
                    .parse()
                    .map_err(|_| BackendError::Transport(format!("{name}: not a number: {v}"))),
                Err(_) => Ok(default),
            }
        };
        Ok(Self {
            base_url,
            timeout_seconds: num("APPFORGE_REMOTE_TIMEOUT", 60)?,
            retries: num("APPFORGE_REMOTE_RETRIES", 2)? as u32,
        })
    }
}

/// JSON-over-HTTP generator service.
///
/// The service receives `{kind, schema_id, context}` and answers
/// `{payload, advisory?}`. Payload validation happens on the caller's side
/// exactly as for any other backend.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    kind: &'a str,
    schema_id: &'a str,
    context: &'a Value,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_seconds.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn attempt(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        let url = format!("{}/generate", self.config.base_url.trim_end_matches('/'));
        let body = WireRequest {
            kind: req.kind.as_str(),
            schema_id: &req.schema_id,
            context: &req.context,
        };
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<GenResponse>()
            .map_err(|e| BackendError::Transport(format!("malformed response: {e}")))
    }
}

impl GeneratorBackend for RemoteBackend {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.attempt(req) {
                Ok(r) => return Ok(r),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
