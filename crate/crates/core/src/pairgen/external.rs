//! External rewriter client: OpenAI-compatible chat completions over HTTP
//! with retries and an on-disk response cache.
//!
//! Every response body is recorded verbatim in the cache, keyed by the
//! SHA-256 of the request JSON, so reruns replay byte-identically without
//! touching the network (`offline` mode enforces this).

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalRewriterConfig {
    /// Base URL, e.g. `https://api.example.com/v1`; the client posts to
    /// `{endpoint}/chat/completions`.
    pub endpoint: String,
    /// Model name sent in the request body.
    pub model: String,
    /// Name of the environment variable holding the bearer credential;
    /// `None` sends no Authorization header.
    pub credential_env: Option<String>,
    pub cache_dir: PathBuf,
    /// Serve from cache only; a missing entry is an error instead of a call.
    pub offline: bool,
    /// Retries after the first attempt on transient failures.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl ExternalRewriterConfig {
    pub fn new(endpoint: &str, model: &str, cache_dir: PathBuf) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            credential_env: None,
            cache_dir,
            offline: false,
            max_retries: 3,
            initial_backoff_ms: 250,
            timeout_secs: 60,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

pub struct RewriterClient {
    config: ExternalRewriterConfig,
    http: reqwest::blocking::Client,
    credential: Option<String>,
}

impl RewriterClient {
    pub fn new(config: ExternalRewriterConfig) -> Result<Self> {
        if config.endpoint.is_empty() || config.model.is_empty() {
            return Err(CoreError::Config(
                "external rewriter requires an endpoint and a model name".into(),
            ));
        }
        let credential = match &config.credential_env {
            Some(name) => Some(std::env::var(name).map_err(|_| {
                CoreError::Config(format!("credential environment variable {name} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| CoreError::Network(e.to_string()))?;
        Ok(Self {
            config,
            http,
            credential,
        })
    }

    pub fn config(&self) -> &ExternalRewriterConfig {
        &self.config
    }

    /// Rewrite one solution. The request carries the rewrite template with
    /// the question and original response filled in; the reply text is the
    /// rewritten solution.
    pub fn rewrite(&self, question: &str, original_response: &str) -> Result<String> {
        let content = prompts::dense_rewrite_prompt(question, original_response);
        let request = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &content,
            }],
            temperature: 0.0,
        };
        let request_json = serde_json::to_string(&request)?;
        let key = hex::encode(Sha256::digest(request_json.as_bytes()));
        let cache_path = self.config.cache_dir.join(format!("{key}.json"));

        let body = if cache_path.exists() {
            fs::read_to_string(&cache_path)?
        } else if self.config.offline {
            return Err(CoreError::CacheMiss(format!(
                "no cached response for request {key}"
            )));
        } else {
            let body = self.post_with_retries(&request_json)?;
            fs::create_dir_all(&self.config.cache_dir)?;
            fs::write(&cache_path, &body)?;
            body
        };
        extract_content(&body)
    }

    fn post_with_retries(&self, request_json: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.endpoint);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            let mut builder = self
                .http
                .post(&url)
                .header("Content-Type", "application/json")
                .body(request_json.to_string());
            if let Some(token) = &self.credential {
                builder = builder.header("Authorization", format!("Bearer {token}"));
            }
            match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    let text = response
                        .text()
                        .map_err(|e| CoreError::Network(e.to_string()))?;
                    if status.is_success() {
                        return Ok(text);
                    }
                    // 429 and 5xx are transient; other statuses are final.
                    let transient = status.as_u16() == 429 || status.is_server_error();
                    last_error = format!("status {status}: {text}");
                    if !transient {
                        return Err(CoreError::Network(last_error));
                    }
                    log::warn!(
                        "rewriter attempt {} failed ({status}), retrying",
                        attempt + 1
                    );
                }
                Err(e) => {
                    last_error = e.to_string();
                    log::warn!("rewriter attempt {} failed ({e}), retrying", attempt + 1);
                }
            }
        }
        Err(CoreError::Network(format!(
            "retries exhausted: {last_error}"
        )))
    }
}

fn extract_content(body: &str) -> Result<String> {
    let response: ChatResponse = serde_json::from_str(body)
        .map_err(|e| CoreError::Network(format!("malformed rewriter response: {e}")))?;
    let content = response
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .unwrap_or_default();
    if content.trim().is_empty() {
        return Err(CoreError::EmptyResponse);
    }
    Ok(content)
}
