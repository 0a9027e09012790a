//! Backend-agnostic multimodal chat completion.
//!
//! Every model, remote or mock, sits behind [`Backend`]. Backend kinds are
//! registered by name in [`backend_kinds`] and built from a [`BackendConfig`]
//! at runtime:
//!
//! | kind                         | implementation            |
//! |------------------------------|---------------------------|
//! | `openai-chat-schema`         | [`remote::RemoteBackend`] + [`wire::OpenAiChat`] |
//! | `anthropic-messages-schema`  | [`remote::RemoteBackend`] + [`wire::AnthropicMessages`] |
//! | `fixture-mock`               | [`fixture::FixtureBackend`] |
//! | `oracle-mock`                | [`oracle::OracleBackend`] |

pub mod fixture;
pub mod oracle;
pub mod remote;
pub mod wire;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::digest::canonical_digest;
use crate::error::{Error, Result};
use crate::registry::Registry;

pub use crate::sampler::{Detail, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Image { image: Image, detail: Detail },
}

impl Part {
    pub fn text(t: impl Into<String>) -> Self {
        Part::Text { text: t.into() }
    }

    pub fn image(image: Image, detail: Detail) -> Self {
        Part::Image { image, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![Part::text(text)])
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::text(text)],
        }
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Memory,
    Plan,
    Judge,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Memory => "memory",
            Stage::Plan => "plan",
            Stage::Judge => "judge",
        }
    }
}

/// Pipeline-side label for a request. Not sent over the wire and not part of
/// the request digest; mocks use it to find sample-scoped answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestScope {
    pub stage: Stage,
    pub sample_id: String,
    pub segment_index: Option<usize>,
    /// Planning run label (`"0"`.. for votes, `"a"`/`"b"` for arbitration).
    pub run: Option<String>,
    /// 0 for the first ask, 1 for the re-ask.
    pub attempt: u32,
}

impl RequestScope {
    pub fn new(stage: Stage, sample_id: impl Into<String>) -> Self {
        Self {
            stage,
            sample_id: sample_id.into(),
            segment_index: None,
            run: None,
            attempt: 0,
        }
    }

    /// Fixture keys from most to least specific, e.g.
    /// `plan/s1/0/1`, `plan/s1/0`, `plan/s1`, `plan`.
    pub fn keys(&self) -> Vec<String> {
        let mut parts = vec![self.stage.as_str().to_string(), self.sample_id.clone()];
        if let Some(i) = self.segment_index {
            parts.push(i.to_string());
        }
        if let Some(r) = &self.run {
            parts.push(r.clone());
        }
        parts.push(self.attempt.to_string());
        (1..=parts.len()).rev().map(|n| parts[..n].join("/")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    #[serde(skip)]
    pub scope: Option<RequestScope>,
}

impl ModelRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
            scope: None,
        }
    }

    pub fn with_scope(mut self, scope: RequestScope) -> Self {
        self.scope = Some(scope);
        self
    }

    /// Stable content digest: canonical JSON with images replaced by their
    /// SHA-256. The scope is excluded.
    pub fn digest(&self) -> String {
        canonical_digest(self)
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter(|p| matches!(p, Part::Image { .. }))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("invalid model request: {why}")));
        if self.messages.is_empty() {
            return bad("no messages");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        match self.messages.iter().find(|m| m.role != Role::System) {
            Some(m) if m.role == Role::User => {}
            _ => return bad("first non-system message must come from the user"),
        }
        for m in &self.messages {
            if m.parts.is_empty() {
                return bad("message without parts");
            }
            if m.role != Role::User && m.parts.iter().any(|p| matches!(p, Part::Image { .. })) {
                return bad("only user messages may carry images");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Retries spent before this response arrived.
    #[serde(default)]
    pub retries: u32,
}

pub trait Backend: Send + Sync {
    /// Configured backend name, e.g. `gpt`.
    fn id(&self) -> &str;

    fn model_id(&self) -> &str;

    /// Largest number of images one request may carry.
    fn max_images(&self) -> Option<usize> {
        None
    }

    /// Performs the exchange. Callers go through [`Backend::complete`].
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse>;

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse> {
        request.validate()?;
        if let Some(limit) = self.max_images() {
            let count = request.image_count();
            if count > limit {
                return Err(Error::TooManyImages { count, limit });
            }
        }
        self.send(request)
    }
}

/// Rough token estimate for mocks: four characters per token, 85 per image.
pub(crate) fn estimate_prompt_tokens(request: &ModelRequest) -> u64 {
    request
        .messages
        .iter()
        .flat_map(|m| &m.parts)
        .map(|p| match p {
            Part::Text { text } => estimate_text_tokens(text),
            Part::Image { .. } => 85,
        })
        .sum()
}

pub(crate) fn estimate_text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Wraps a backend and counts calls that reach it.
pub struct CountingBackend {
    inner: Arc<dyn Backend>,
    calls: AtomicUsize,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for CountingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn max_images(&self) -> Option<usize> {
        self.inner.max_images()
    }
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(request)
    }
}

// ---------------------------------------------------------------------------
// configuration and factories

fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Registered kind name, see [`backend_kinds`].
    pub kind: String,
    /// Model identifier sent on the wire; defaults to the backend name.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub rate_limit_rps: Option<f64>,
    #[serde(default)]
    pub max_images: Option<usize>,
    /// fixture-mock: JSON map of digest or scoped key to response text.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// fixture-mock: response for unmatched requests; absent means strict.
    #[serde(default)]
    pub default_response: Option<String>,
    /// oracle-mock: probability of a uniformly wrong answer.
    #[serde(default)]
    pub error_rate: Option<f64>,
    /// oracle-mock: RNG seed for `error_rate`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl BackendConfig {
    pub fn of_kind(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            model: None,
            base_url: None,
            api_key_env: None,
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            timeout_ms: default_timeout_ms(),
            rate_limit_rps: None,
            max_images: None,
            fixtures: None,
            default_response: None,
            error_rate: None,
            seed: None,
        }
    }

    pub fn fixture(path: impl Into<PathBuf>) -> Self {
        Self {
            fixtures: Some(path.into()),
            ..Self::of_kind(fixture::KIND)
        }
    }

    pub fn oracle(behavior: oracle::OracleBehavior) -> Self {
        let (error_rate, seed) = match behavior {
            oracle::OracleBehavior::Perfect => (None, None),
            oracle::OracleBehavior::FixedErrorRate { p, seed } => (Some(p), Some(seed)),
        };
        Self {
            error_rate,
            seed,
            ..Self::of_kind(oracle::KIND)
        }
    }

    pub fn model_for(&self, name: &str) -> String {
        self.model.clone().unwrap_or_else(|| name.to_string())
    }
}

/// What factories may need besides the config itself.
#[derive(Clone, Copy)]
pub struct BuildContext<'a> {
    /// Directory relative config paths are resolved against.
    pub base_dir: &'a Path,
    pub manifest: Option<&'a DatasetManifest>,
}

pub trait BackendFactory: Send + Sync {
    fn build(
        &self,
        name: &str,
        config: &BackendConfig,
        ctx: BuildContext<'_>,
    ) -> Result<Arc<dyn Backend>>;
}

/// The built-in backend kinds.
pub fn backend_kinds() -> Registry<dyn BackendFactory> {
    let mut reg: Registry<dyn BackendFactory> = Registry::new("backend kind");
    reg.register(wire::OPENAI_KIND, Arc::new(remote::RemoteFactory::openai()))
        .register(
            wire::ANTHROPIC_KIND,
            Arc::new(remote::RemoteFactory::anthropic()),
        )
        .register(fixture::KIND, Arc::new(fixture::FixtureFactory))
        .register(oracle::KIND, Arc::new(oracle::OracleFactory));
    reg
}

pub fn build_backend(
    name: &str,
    config: &BackendConfig,
    ctx: BuildContext<'_>,
) -> Result<Arc<dyn Backend>> {
    backend_kinds().get(&config.kind)?.build(name, config, ctx)
}
