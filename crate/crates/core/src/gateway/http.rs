//! Chat-completions backend over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, BackendResponse, GenerationRequest, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig { base_url: "https://api.openai.com/v1".into(), api_key_env: "OPENAI_API_KEY".into(), timeout_secs: 120 }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> anyhow::Result<Self> {
        let key =
            std::env::var(&config.api_key_env).map_err(|_| anyhow::anyhow!("environment variable {} is not set", config.api_key_env))?;
        let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(config.timeout_secs)).build()?;
        Ok(HttpBackend { config, key, client })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl Backend for HttpBackend {
    fn complete(&self, model: &ModelSpec, req: &GenerationRequest, max_tokens: u32) -> Result<BackendResponse, BackendError> {
        let body = json!({
            "model": model.id,
            "messages": [{"role": "user", "content": req.prompt}],
            "n": req.n_samples,
            "temperature": req.temperature,
            "max_tokens": max_tokens,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let resp = self.client.post(url).bearer_auth(&self.key).json(&body).send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            let msg = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                BackendError::Transient(msg)
            } else {
                BackendError::Fatal(msg)
            });
        }
        let parsed: ChatResponse = resp.json().map_err(|e| BackendError::Transient(e.to_string()))?;
        let texts: Vec<String> = parsed.choices.into_iter().filter_map(|c| c.message.content).collect();
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (super::estimate_tokens(&req.prompt) as u64, texts.iter().map(|t| super::estimate_tokens(t) as u64).sum()),
        };
        Ok(BackendResponse { texts, prompt_tokens, completion_tokens })
    }
}
