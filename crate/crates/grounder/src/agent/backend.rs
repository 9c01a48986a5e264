//! VLM chat backends: the trait, a deterministic scripted implementation,
//! and a chat-completions HTTP client.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use image::RgbImage;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    /// Networking/timeout class failures; worth one retry.
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    /// The server answered but not in the expected shape.
    #[error("backend protocol error: {detail}")]
    Protocol { detail: String },
    /// A scripted backend ran past its canned responses.
    #[error("scripted backend exhausted after {served} responses")]
    Exhausted { served: usize },
    /// The script file is unreadable or malformed.
    #[error("script error: {detail}")]
    Script { detail: String },
    #[error("missing API key: environment variable {var} is not set")]
    MissingApiKey { var: String },
}

impl BackendError {
    /// True for failures that a single immediate retry may fix.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// An image going to the VLM. Transcripts record only its label and size;
/// pixels are serialized (base64) exclusively for HTTP requests.
#[derive(Debug, Clone)]
pub struct AttachedImage {
    pub label: String,
    pub image: RgbImage,
}

impl Serialize for AttachedImage {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("AttachedImage", 3)?;
        s.serialize_field("label", &self.label)?;
        s.serialize_field("width", &self.image.width())?;
        s.serialize_field("height", &self.image.height())?;
        s.end()
    }
}

/// One chat turn. A message may carry any number of images.
#[derive(Debug, Clone, Serialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<AttachedImage>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<AttachedImage>) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }
}

/// A conversational vision-language model. Implementations hold no
/// conversation state; the full message history arrives with every call.
pub trait VlmBackend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;

    /// Upper bound on images per request, when the backend has one.
    fn max_images_per_request(&self) -> Option<usize> {
        None
    }
}

/// Replays canned responses in order, ignoring request content. One instance
/// serves one conversation thread; concurrent threads get their own.
pub struct ScriptedBackend {
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> ScriptedBackend {
        ScriptedBackend {
            responses,
            cursor: Mutex::new(0),
        }
    }

    /// Number of responses handed out so far.
    pub fn served(&self) -> usize {
        *self.cursor.lock().expect("cursor lock")
    }
}

impl VlmBackend for ScriptedBackend {
    fn chat(&self, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        match self.responses.get(*cursor) {
            Some(r) => {
                *cursor += 1;
                Ok(r.clone())
            }
            None => Err(BackendError::Exhausted { served: *cursor }),
        }
    }
}

/// A script file maps conversation keys (query IDs) to ordered response
/// lists; the key `"*"` is the fallback for keys not listed. Within one key,
/// responses are keyed by call index — the nth call gets the nth entry.
#[derive(Debug)]
pub struct ScriptFile {
    scripts: BTreeMap<String, Vec<String>>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<ScriptFile, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Script {
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        let scripts = serde_json::from_str(&text).map_err(|e| BackendError::Script {
            detail: format!("malformed script {}: {e}", path.display()),
        })?;
        Ok(ScriptFile { scripts })
    }

    /// A fresh backend replaying the responses for `key` (or the `"*"`
    /// fallback). Each call starts its own cursor, so concurrent
    /// conversations stay deterministic.
    pub fn backend_for(&self, key: &str) -> Result<ScriptedBackend, BackendError> {
        let responses = self
            .scripts
            .get(key)
            .or_else(|| self.scripts.get("*"))
            .ok_or_else(|| BackendError::Script {
                detail: format!("no script entry for {key:?} and no \"*\" fallback"),
            })?;
        Ok(ScriptedBackend::new(responses.clone()))
    }
}

/// Chat-completions-style HTTP backend. Images are attached as base64 PNG
/// data URIs. The API key is read from an environment variable at
/// construction so configs never carry credentials.
pub struct HttpVlmBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    top_p: f64,
    max_images: Option<usize>,
    client: reqwest::blocking::Client,
}

impl HttpVlmBackend {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base_url: &str,
        model: &str,
        api_key_env: Option<&str>,
        temperature: f64,
        top_p: f64,
        timeout: Duration,
        max_images: Option<usize>,
    ) -> Result<HttpVlmBackend, BackendError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingApiKey {
                var: var.to_string(),
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                detail: e.to_string(),
            })?;
        Ok(HttpVlmBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            temperature,
            top_p,
            max_images,
            client,
        })
    }

    fn encode_message(msg: &ChatMessage) -> Result<serde_json::Value, BackendError> {
        let role = match msg.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        if msg.images.is_empty() {
            return Ok(serde_json::json!({ "role": role, "content": msg.text }));
        }
        let mut parts = vec![serde_json::json!({ "type": "text", "text": msg.text })];
        for attachment in &msg.images {
            let mut png = Cursor::new(Vec::new());
            attachment
                .image
                .write_to(&mut png, image::ImageFormat::Png)
                .map_err(|e| BackendError::Protocol {
                    detail: format!("png encode: {e}"),
                })?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(png.into_inner());
            parts.push(serde_json::json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{b64}") }
            }));
        }
        Ok(serde_json::json!({ "role": role, "content": parts }))
    }

    fn extract_content(body: &serde_json::Value) -> Option<String> {
        let content = body
            .get("choices")?
            .get(0)?
            .get("message")?
            .get("content")?;
        match content {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Array(parts) => Some(
                parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                    .collect::<Vec<_>>()
                    .join(""),
            ),
            _ => None,
        }
    }
}

impl VlmBackend for HttpVlmBackend {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let encoded: Result<Vec<_>, _> = messages.iter().map(Self::encode_message).collect();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "messages": encoded?,
        });
        let mut request = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::Transport {
            detail: e.to_string(),
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport {
                detail: format!("status {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Protocol {
                detail: format!("status {status}"),
            });
        }
        let body: serde_json::Value = response.json().map_err(|e| BackendError::Protocol {
            detail: e.to_string(),
        })?;
        Self::extract_content(&body).ok_or_else(|| BackendError::Protocol {
            detail: "no message content".into(),
        })
    }

    fn max_images_per_request(&self) -> Option<usize> {
        self.max_images
    }
}
