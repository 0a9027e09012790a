//! HTTP-backed models with retries and client-side rate limiting.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;

use super::wire::{AnthropicMessages, OpenAiChat, WireSchema};
use super::{Backend, BackendConfig, BackendFactory, BuildContext, ModelRequest, ModelResponse};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// Minimal blocking JSON POST.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<HttpReply, TransportError>;
}

#[derive(Debug)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).timeout(timeout);
        req = req.set("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.set(k, v);
        }
        match req.send_string(&body.to_string()) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp
                    .into_string()
                    .map_err(|e| TransportError::Other(e.to_string()))?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpReply {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                let lower = msg.to_ascii_lowercase();
                if lower.contains("timed out") || lower.contains("timeout") {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Other(msg))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based). `jitter` in `[0, 1)`
    /// adds up to half the exponential step, so consecutive delays never
    /// shrink: `base·2^k·1.5 <= base·2^(k+1)`.
    pub fn delay(&self, retry: u32, jitter: f64) -> Duration {
        let step = self.backoff_base_ms.saturating_mul(1u64 << retry.min(30));
        let extra = (step as f64 * 0.5 * jitter.clamp(0.0, 0.999_999)) as u64;
        Duration::from_millis(step.saturating_add(extra))
    }
}

/// Token bucket shared by all callers of one backend.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let capacity = requests_per_second.max(1.0);
        Self {
            rate: requests_per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.rate).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct RemoteBackend {
    name: String,
    model_id: String,
    base_url: String,
    api_key: String,
    schema: Box<dyn WireSchema>,
    transport: Arc<dyn HttpTransport>,
    policy: RetryPolicy,
    limiter: Option<RateLimiter>,
    max_images: Option<usize>,
}

impl RemoteBackend {
    pub fn new(
        name: impl Into<String>,
        config: &BackendConfig,
        schema: Box<dyn WireSchema>,
        api_key: impl Into<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self> {
        let name = name.into();
        let base_url = config
            .base_url
            .clone()
            .ok_or_else(|| Error::Config(format!("backend `{name}` needs base_url")))?;
        Ok(Self {
            model_id: config.model_for(&name),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            schema,
            transport,
            policy: RetryPolicy {
                max_retries: config.max_retries,
                backoff_base_ms: config.backoff_base_ms,
                timeout_ms: config.timeout_ms,
            },
            limiter: config
                .rate_limit_rps
                .filter(|r| *r > 0.0)
                .map(RateLimiter::new),
            max_images: config.max_images,
            name,
        })
    }

    fn excerpt(body: &str) -> String {
        body.chars().take(300).collect()
    }
}

enum Retryable {
    RateLimited,
    Server(u16, String),
    Timeout,
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_images(&self) -> Option<usize> {
        self.max_images
    }

    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let url = format!("{}{}", self.base_url, self.schema.path());
        let headers = self.schema.headers(&self.api_key);
        let body = self.schema.encode(request);
        let timeout = Duration::from_millis(self.policy.timeout_ms);
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let failure = match self.transport.post_json(&url, &headers, &body, timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let value: Value =
                        serde_json::from_str(&reply.body).map_err(|e| Error::BadResponse {
                            backend: self.name.clone(),
                            message: e.to_string(),
                        })?;
                    let decoded = self.schema.decode(&value).map_err(|message| {
                        Error::BadResponse {
                            backend: self.name.clone(),
                            message,
                        }
                    })?;
                    return Ok(ModelResponse {
                        text: decoded.text,
                        prompt_tokens: decoded.prompt_tokens,
                        completion_tokens: decoded.completion_tokens,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend_id: self.name.clone(),
                        retries,
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(Error::AuthFailed {
                        backend: self.name.clone(),
                        status: reply.status,
                    })
                }
                Ok(reply) if reply.status == 429 => Retryable::RateLimited,
                Ok(reply) if reply.status >= 500 => {
                    Retryable::Server(reply.status, Self::excerpt(&reply.body))
                }
                Ok(reply) => {
                    return Err(Error::Transport {
                        backend: self.name.clone(),
                        message: format!("HTTP {}: {}", reply.status, Self::excerpt(&reply.body)),
                    })
                }
                Err(TransportError::Timeout) => Retryable::Timeout,
                Err(TransportError::Other(message)) => {
                    return Err(Error::Transport {
                        backend: self.name.clone(),
                        message,
                    })
                }
            };
            if retries >= self.policy.max_retries {
                return Err(match failure {
                    Retryable::RateLimited => Error::RateLimited {
                        backend: self.name.clone(),
                        retries,
                    },
                    Retryable::Timeout => Error::Timeout {
                        backend: self.name.clone(),
                        retries,
                    },
                    Retryable::Server(status, body) => Error::Transport {
                        backend: self.name.clone(),
                        message: format!("HTTP {status} after {retries} retries: {body}"),
                    },
                });
            }
            let delay = self.policy.delay(retries, rand::thread_rng().gen());
            log::warn!(
                "backend `{}`: retry {} in {:?}",
                self.name,
                retries + 1,
                delay
            );
            std::thread::sleep(delay);
            retries += 1;
        }
    }
}

pub struct RemoteFactory {
    schema: fn() -> Box<dyn WireSchema>,
    transport: Option<Arc<dyn HttpTransport>>,
}

impl RemoteFactory {
    pub fn openai() -> Self {
        Self {
            schema: || Box::new(OpenAiChat),
            transport: None,
        }
    }

    pub fn anthropic() -> Self {
        Self {
            schema: || Box::new(AnthropicMessages),
            transport: None,
        }
    }

    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = Some(transport);
        self
    }
}

impl BackendFactory for RemoteFactory {
    fn build(
        &self,
        name: &str,
        config: &BackendConfig,
        _ctx: BuildContext<'_>,
    ) -> Result<Arc<dyn Backend>> {
        if config.base_url.is_none() {
            return Err(Error::Config(format!("backend `{name}` needs base_url")));
        }
        let env = config
            .api_key_env
            .as_deref()
            .ok_or_else(|| Error::Config(format!("backend `{name}` needs api_key_env")))?;
        let key = std::env::var(env).map_err(|_| {
            Error::Config(format!("backend `{name}`: environment variable {env} is not set"))
        })?;
        let transport = self
            .transport
            .clone()
            .unwrap_or_else(|| Arc::new(UreqTransport::new()));
        Ok(Arc::new(RemoteBackend::new(
            name,
            config,
            (self.schema)(),
            key,
            transport,
        )?))
    }
}
