use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::{ChatBackend, ChatMessage, LlmError, ProviderConfig};
use crate::http::{HttpRequest, HttpTransport};

/// OpenAI-compatible chat-completions endpoint.
///
/// Request body: `{model, messages: [{role, content}], temperature,
/// max_tokens}`. The reply is the first choice's message content. The API key
/// is read from the environment variable named in the config on every call
/// and never stored.
pub struct HttpChatBackend {
    transport: Arc<dyn HttpTransport>,
}

impl HttpChatBackend {
    pub fn new(transport: Arc<dyn HttpTransport>) -> Self {
        Self { transport }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, config: &ProviderConfig, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": config.model,
            "messages": messages,
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
        });
        let mut req = HttpRequest::post_json(config.endpoint.clone(), &body)
            .timeout(Duration::from_secs(config.timeout_secs));
        match std::env::var(&config.api_key_env) {
            Ok(key) if !key.is_empty() => {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            // Local gateways often run without a key; only complain when the
            // provider says so.
            _ => {}
        }
        let resp = self
            .transport
            .execute(&req)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if resp.status == 401 && std::env::var(&config.api_key_env).is_err() {
            return Err(LlmError::MissingApiKey(config.api_key_env.clone()));
        }
        if !resp.is_success() {
            return Err(LlmError::Status {
                status: resp.status,
                body: resp.text(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_slice(&resp.body).map_err(|e| LlmError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Decode("response has no choices[0].message.content".into()))
    }
}
