use std::time::Duration;

use serde_json::{json, Value};

use super::gateway::{BackendError, CompletionParams, LlmBackend};
use super::template::Message;

pub const API_KEY_ENV: &str = "NLLF_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "NLLF_LLM_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// OpenAI-compatible chat-completions endpoint.
pub struct HostedBackend {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HostedBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        HostedBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    /// Reads `NLLF_LLM_API_KEY` (falling back to `OPENAI_API_KEY`) and `NLLF_LLM_BASE_URL`.
    pub fn from_env() -> Result<Self, String> {
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var("OPENAI_API_KEY"))
            .map_err(|_| format!("set {API_KEY_ENV} to use the hosted backend"))?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(base, key))
    }
}

pub fn request_body(messages: &[Message], params: &CompletionParams) -> Value {
    json!({
        "model": params.model_id,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "messages": messages,
    })
}

fn parse_reply(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Fatal(format!("unexpected response shape: {body}")))
}

impl LlmBackend for HostedBackend {
    fn complete(&self, messages: &[Message], params: &CompletionParams) -> Result<String, BackendError> {
        let resp = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request_body(messages, params));
        match resp {
            Ok(r) => {
                let body: Value = r
                    .into_json()
                    .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
                parse_reply(&body)
            }
            Err(ureq::Error::Status(429, r)) => {
                let retry_after = r
                    .header("retry-after")
                    .and_then(|v| v.parse::<u64>().ok())
                    .map(Duration::from_secs);
                Err(BackendError::RateLimited { retry_after, message: "HTTP 429".into() })
            }
            Err(ureq::Error::Status(code, r)) if code >= 500 => Err(BackendError::Transient(format!(
                "HTTP {code}: {}",
                r.into_string().unwrap_or_default()
            ))),
            Err(ureq::Error::Status(code, r)) => Err(BackendError::Fatal(format!(
                "HTTP {code}: {}",
                r.into_string().unwrap_or_default()
            ))),
            Err(e) => Err(BackendError::Transient(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_carries_roles_and_params() {
        let body = request_body(
            &[Message::system("sys"), Message::user("hi")],
            &CompletionParams::new("gpt-3.5-turbo-0301"),
        );
        assert_eq!(body["model"], "gpt-3.5-turbo-0301");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
    }

    #[test]
    fn reply_parsing() {
        let ok = json!({"choices": [{"message": {"role": "assistant", "content": "Yes."}}]});
        assert_eq!(parse_reply(&ok).unwrap(), "Yes.");
        assert!(matches!(parse_reply(&json!({})), Err(BackendError::Fatal(_))));
    }
}
