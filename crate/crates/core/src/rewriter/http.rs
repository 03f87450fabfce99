//! Chat-completion backend speaking the OpenAI-compatible JSON protocol.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, GenerationRequest, RewriteBackend, VerificationRequest};

pub const API_KEY_VAR: &str = "RAZOR_API_KEY";
pub const API_BASE_VAR: &str = "RAZOR_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Serialize, Debug)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize, Debug)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
}

#[derive(Deserialize, Debug)]
struct ChatCompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize, Debug)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize, Debug)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    model: String,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.into(),
            model: model.into(),
        }
    }

    /// Reads the bearer token from `RAZOR_API_KEY` and the base URL from
    /// `RAZOR_API_BASE` (default: the OpenAI v1 endpoint).
    pub fn from_env(model: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_VAR)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::Config(format!("{API_KEY_VAR} is not set")))?;
        let base = std::env::var(API_BASE_VAR).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Ok(Self::new(&base, api_key, model, timeout))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn complete(&self, system: &str, prompt: &str, temperature: f64, top_p: f64) -> Result<String, BackendError> {
        let body = ChatCompletionRequest {
            model: &self.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: prompt,
                },
            ],
            temperature,
            top_p,
        };
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Rejected(format!("HTTP {status}: {}", detail.trim())));
        }
        let parsed: ChatCompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }
}

/// Splits a multi-line completion into candidate sentences, dropping list
/// markers and surrounding quotes.
pub fn split_candidates(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|line| {
            let line = line.trim();
            let unnumbered = line.trim_start_matches(|c: char| c.is_ascii_digit());
            let line = if unnumbered.len() < line.len() {
                unnumbered
                    .strip_prefix(". ")
                    .or_else(|| unnumbered.strip_prefix(") "))
                    .unwrap_or(line)
            } else {
                line
            };
            let line = line.trim_start_matches(['-', '*', '•']).trim();
            line.trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}').trim().to_string()
        })
        .filter(|line| !line.is_empty())
        .collect()
}

impl RewriteBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
        let reply = self.complete(
            "You rewrite sentences for dataset construction. Follow the instructions exactly.",
            request.prompt,
            request.temperature,
            request.top_p,
        )?;
        Ok(split_candidates(&reply))
    }

    fn verify(&self, request: &VerificationRequest<'_>) -> Result<String, BackendError> {
        self.complete(
            "You are a careful annotator. Reply with the label only.",
            request.prompt,
            request.temperature,
            request.top_p,
        )
    }
}
