//! Canned responses looked up by request digest or sample-scoped key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use super::{
    estimate_prompt_tokens, estimate_text_tokens, Backend, BackendConfig, BackendFactory,
    BuildContext, ModelRequest, ModelResponse,
};
use crate::error::{Error, Result};

pub const KIND: &str = "fixture-mock";

/// Offline backend answering from a `{key: response}` map.
///
/// Lookup order: the request digest, then the keys of the request's
/// [`RequestScope`](super::RequestScope) from most to least specific, then
/// the default response. Without a default, unmatched requests fail with
/// [`Error::MissingFixture`].
#[derive(Debug)]
pub struct FixtureBackend {
    name: String,
    model_id: String,
    fixtures: HashMap<String, String>,
    default_response: Option<String>,
    calls: AtomicUsize,
}

impl FixtureBackend {
    pub fn new(name: impl Into<String>, fixtures: HashMap<String, String>) -> Self {
        let name = name.into();
        Self {
            model_id: name.clone(),
            name,
            fixtures,
            default_response: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fixtures: HashMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok(Self::new(name, fixtures))
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn lookup(&self, request: &ModelRequest) -> Result<&str> {
        let digest = request.digest();
        if let Some(hit) = self.fixtures.get(&digest) {
            return Ok(hit);
        }
        if let Some(scope) = &request.scope {
            for key in scope.keys() {
                if let Some(hit) = self.fixtures.get(&key) {
                    return Ok(hit);
                }
            }
        }
        self.default_response
            .as_deref()
            .ok_or(Error::MissingFixture(digest))
    }
}

impl Backend for FixtureBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let started = Instant::now();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self.lookup(request)?.to_string();
        Ok(ModelResponse {
            prompt_tokens: estimate_prompt_tokens(request),
            completion_tokens: estimate_text_tokens(&text),
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: self.name.clone(),
            retries: 0,
        })
    }
}

pub struct FixtureFactory;

impl BackendFactory for FixtureFactory {
    fn build(
        &self,
        name: &str,
        config: &BackendConfig,
        ctx: BuildContext<'_>,
    ) -> Result<Arc<dyn Backend>> {
        let mut backend = match &config.fixtures {
            Some(path) => FixtureBackend::from_file(name, &ctx.base_dir.join(path))?,
            None => FixtureBackend::new(name, HashMap::new()),
        }
        .with_model(config.model_for(name));
        if let Some(d) = &config.default_response {
            backend = backend.with_default(d.clone());
        }
        Ok(Arc::new(backend))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatMessage, RequestScope, Stage};

    fn req(text: &str) -> ModelRequest {
        ModelRequest::new("m", vec![ChatMessage::user_text(text)])
    }

    #[test]
    fn digest_hit() {
        let r = req("hello");
        let fx = FixtureBackend::new("fx", HashMap::from([(r.digest(), "world".to_string())]));
        assert_eq!(fx.complete(&r).unwrap().text, "world");
        assert_eq!(fx.calls(), 1);
    }

    #[test]
    fn default_and_strict() {
        let fx = FixtureBackend::new("fx", HashMap::new()).with_default("(A)");
        assert_eq!(fx.complete(&req("x")).unwrap().text, "(A)");
        let strict = FixtureBackend::new("fx", HashMap::new());
        let r = req("x");
        match strict.complete(&r).unwrap_err() {
            Error::MissingFixture(d) => assert_eq!(d, r.digest()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scoped_keys_fall_back_to_less_specific() {
        let fx = FixtureBackend::new(
            "fx",
            HashMap::from([
                ("plan/s1".to_string(), "generic".to_string()),
                ("plan/s1/0/1".to_string(), "reask".to_string()),
            ]),
        );
        let mut scope = RequestScope::new(Stage::Plan, "s1");
        scope.run = Some("0".into());
        let r = req("x").with_scope(scope.clone());
        assert_eq!(fx.complete(&r).unwrap().text, "generic");
        scope.attempt = 1;
        let r = req("x").with_scope(scope);
        assert_eq!(fx.complete(&r).unwrap().text, "reask");
    }
}
