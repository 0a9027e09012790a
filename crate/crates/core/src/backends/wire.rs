//! Request/response bodies for the two supported remote API shapes.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde_json::{json, Map, Value};

use super::{Detail, ModelRequest, Part, Role};

pub const OPENAI_KIND: &str = "openai-chat-schema";
pub const ANTHROPIC_KIND: &str = "anthropic-messages-schema";

/// Text and token usage pulled out of a successful response body.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub trait WireSchema: Send + Sync {
    fn name(&self) -> &'static str;

    /// Endpoint path appended to the configured base URL.
    fn path(&self) -> &'static str;

    fn headers(&self, api_key: &str) -> Vec<(String, String)>;

    fn encode(&self, request: &ModelRequest) -> Value;

    fn decode(&self, body: &Value) -> Result<Decoded, String>;
}

fn data_url(part: &Part) -> Option<(String, String, &'static str)> {
    match part {
        Part::Image { image, detail } => Some((
            image.media_type().to_string(),
            BASE64.encode(image.bytes()),
            match detail {
                Detail::Low => "low",
                Detail::High => "high",
            },
        )),
        Part::Text { .. } => None,
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn usage(body: &Value, key: &str) -> u64 {
    body.get("usage")
        .and_then(|u| u.get(key))
        .and_then(Value::as_u64)
        .unwrap_or(0)
}

/// Chat-completions shape: `messages[].content[]` with `image_url` data URLs.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpenAiChat;

impl WireSchema for OpenAiChat {
    fn name(&self) -> &'static str {
        OPENAI_KIND
    }

    fn path(&self) -> &'static str {
        "/chat/completions"
    }

    fn headers(&self, api_key: &str) -> Vec<(String, String)> {
        vec![("Authorization".into(), format!("Bearer {api_key}"))]
    }

    fn encode(&self, request: &ModelRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let content = if m.role == Role::User {
                    Value::Array(
                        m.parts
                            .iter()
                            .map(|p| match p {
                                Part::Text { text } => json!({"type": "text", "text": text}),
                                _ => {
                                    let (mt, b64, detail) = data_url(p).expect("image part");
                                    json!({
                                        "type": "image_url",
                                        "image_url": {
                                            "url": format!("data:{mt};base64,{b64}"),
                                            "detail": detail,
                                        }
                                    })
                                }
                            })
                            .collect(),
                    )
                } else {
                    Value::String(m.text())
                };
                json!({"role": role_name(m.role), "content": content})
            })
            .collect();
        let mut body = Map::new();
        body.insert("model".into(), json!(request.model_id));
        body.insert("messages".into(), Value::Array(messages));
        body.insert("temperature".into(), json!(request.temperature));
        body.insert("max_tokens".into(), json!(request.max_tokens));
        if let Some(seed) = request.seed {
            body.insert("seed".into(), json!(seed));
        }
        Value::Object(body)
    }

    fn decode(&self, body: &Value) -> Result<Decoded, String> {
        let content = body
            .pointer("/choices/0/message/content")
            .ok_or("missing choices[0].message.content")?;
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
            Value::Null => String::new(),
            other => return Err(format!("unexpected content type: {other}")),
        };
        Ok(Decoded {
            text,
            prompt_tokens: usage(body, "prompt_tokens"),
            completion_tokens: usage(body, "completion_tokens"),
        })
    }
}

pub const ANTHROPIC_VERSION: &str = "2023-06-01";

/// Messages-API shape: top-level `system`, content blocks with base64 sources.
#[derive(Debug, Default, Clone, Copy)]
pub struct AnthropicMessages;

impl WireSchema for AnthropicMessages {
    fn name(&self) -> &'static str {
        ANTHROPIC_KIND
    }

    fn path(&self) -> &'static str {
        "/messages"
    }

    fn headers(&self, api_key: &str) -> Vec<(String, String)> {
        vec![
            ("x-api-key".into(), api_key.to_string()),
            ("anthropic-version".into(), ANTHROPIC_VERSION.into()),
        ]
    }

    fn encode(&self, request: &ModelRequest) -> Value {
        let system: Vec<String> = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.text())
            .collect();
        let messages: Vec<Value> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| {
                let blocks: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text { text } => json!({"type": "text", "text": text}),
                        _ => {
                            let (mt, b64, _) = data_url(p).expect("image part");
                            json!({
                                "type": "image",
                                "source": {"type": "base64", "media_type": mt, "data": b64}
                            })
                        }
                    })
                    .collect();
                json!({"role": role_name(m.role), "content": blocks})
            })
            .collect();
        let mut body = Map::new();
        body.insert("model".into(), json!(request.model_id));
        body.insert("max_tokens".into(), json!(request.max_tokens));
        body.insert("temperature".into(), json!(request.temperature));
        if !system.is_empty() {
            body.insert("system".into(), json!(system.join("\n\n")));
        }
        body.insert("messages".into(), Value::Array(messages));
        Value::Object(body)
    }

    fn decode(&self, body: &Value) -> Result<Decoded, String> {
        let blocks = body
            .get("content")
            .and_then(Value::as_array)
            .ok_or("missing content array")?;
        let text = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("");
        Ok(Decoded {
            text,
            prompt_tokens: usage(body, "input_tokens"),
            completion_tokens: usage(body, "output_tokens"),
        })
    }
}
