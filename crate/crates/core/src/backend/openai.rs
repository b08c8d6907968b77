//! Chat-completion client for OpenAI-compatible endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

use super::ChatClient;

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "COPYAUDIT_CHAT_API_KEY";

pub struct OpenAiChatClient {
    api_key: String,
    pub model: String,
    pub base_url: String,
    http: reqwest::blocking::Client,
}

impl OpenAiChatClient {
    /// Reads the API key from [`API_KEY_ENV`].
    pub fn from_env(model: &str) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            AuditError::Config(format!(
                "chat API key not set: export {API_KEY_ENV} to use a remote chat client"
            ))
        })?;
        Ok(OpenAiChatClient {
            api_key,
            model: model.to_string(),
            base_url: "https://api.openai.com/v1".to_string(),
            http: reqwest::blocking::Client::new(),
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    n: usize,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl ChatClient for OpenAiChatClient {
    fn complete(&self, query: &str, temperature: f64, n: usize) -> Result<Vec<String>> {
        if n < 1 {
            return Err(AuditError::Precondition("n must be >= 1".to_string()));
        }
        let request = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: query,
            }],
            temperature,
            n,
        };
        let response = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&request)
            .send()
            .map_err(|e| AuditError::Gateway {
                message: format!("chat request failed: {e}"),
                retriable: true,
            })?;
        if !response.status().is_success() {
            let status = response.status();
            return Err(AuditError::Gateway {
                message: format!("chat endpoint returned {status}"),
                retriable: status.is_server_error(),
            });
        }
        let parsed: ChatResponse = response.json().map_err(|e| AuditError::Gateway {
            message: format!("malformed chat response: {e}"),
            retriable: false,
        })?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| c.message.content)
            .collect())
    }
}
