//! Retrying client for the chat-completions and embeddings endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use riskloop_core::providers::ProviderError;
use serde::{Deserialize, Serialize};

use crate::config::LiveConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub n: usize,
    pub max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Snapshot of the client's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounters {
    /// HTTP requests sent, including retries.
    pub attempts: u64,
    /// Logical chat requests that succeeded.
    pub chat_requests: u64,
    /// Completions returned by successful chat requests.
    pub completions: u64,
    pub embed_requests: u64,
}

pub struct ChatClient {
    config: LiveConfig,
    agent: ureq::Agent,
    attempts: AtomicU64,
    chat_requests: AtomicU64,
    completions: AtomicU64,
    embed_requests: AtomicU64,
}

enum Attempt {
    Done(String),
    Retry(ProviderError),
    Fatal(ProviderError),
}

impl ChatClient {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        ChatClient {
            config,
            agent,
            attempts: AtomicU64::new(0),
            chat_requests: AtomicU64::new(0),
            completions: AtomicU64::new(0),
            embed_requests: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    pub fn counters(&self) -> CallCounters {
        CallCounters {
            attempts: self.attempts.load(Ordering::Relaxed),
            chat_requests: self.chat_requests.load(Ordering::Relaxed),
            completions: self.completions.load(Ordering::Relaxed),
            embed_requests: self.embed_requests.load(Ordering::Relaxed),
        }
    }

    pub fn chat_request(&self, prompt: &str, temperature: f64, n: usize) -> ChatRequest {
        ChatRequest {
            model: self.config.chat_model.clone(),
            messages: vec![Message::user(prompt)],
            temperature,
            n,
            max_tokens: self.config.max_tokens,
        }
    }

    /// One logical chat call; returns exactly `request.n` completions.
    pub fn chat(&self, request: &ChatRequest) -> Result<Vec<String>, ProviderError> {
        if request.n == 0 {
            return Err(ProviderError::InvalidRequest("n must be at least 1".into()));
        }
        let body = self.post("chat/completions", request)?;
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(format!("chat response: {e}")))?;
        if parsed.choices.len() != request.n {
            return Err(ProviderError::Malformed(format!(
                "asked for {} completions, got {}",
                request.n,
                parsed.choices.len()
            )));
        }
        let out: Vec<String> = parsed
            .choices
            .into_iter()
            .map(|c| {
                c.message
                    .content
                    .ok_or_else(|| ProviderError::Malformed("choice without content".into()))
            })
            .collect::<Result<_, _>>()?;
        self.chat_requests.fetch_add(1, Ordering::Relaxed);
        self.completions.fetch_add(out.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Unit-normalized embeddings, in input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let model = self
            .config
            .embed_model
            .as_deref()
            .ok_or_else(|| ProviderError::InvalidRequest("no embedding model configured".into()))?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = self.post("embeddings", &EmbedBody { model, input: texts })?;
        let mut parsed: EmbedResponse =
            serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(format!("embeddings response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        self.embed_requests.fetch_add(1, Ordering::Relaxed);
        parsed
            .data
            .into_iter()
            .map(|d| {
                let norm = d.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || norm == 0.0 {
                    return Err(ProviderError::Malformed("zero or non-finite embedding".into()));
                }
                Ok(d.embedding.iter().map(|x| x / norm).collect())
            })
            .collect()
    }

    fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<String, ProviderError> {
        let url = format!("{}/{}", self.config.api_base, path);
        let attempts = self.config.max_attempts.max(1);
        let mut last = ProviderError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.attempt(&url, body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(last)
    }

    fn attempt<B: Serialize>(&self, url: &str, body: &B) -> Attempt {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let sent = self
            .agent
            .post(url)
            .header("Authorization", format!("Bearer {}", self.config.api_key))
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(e) if transient(&e) => return Attempt::Retry(ProviderError::Transport(e.to_string())),
            Err(e) => return Attempt::Fatal(ProviderError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) if status < 300 => return Attempt::Retry(ProviderError::Transport(e.to_string())),
            Err(_) => String::new(),
        };
        match status {
            200..=299 => Attempt::Done(text),
            401 | 403 => Attempt::Fatal(ProviderError::Auth(format!("http {status}: {}", snippet(&text)))),
            429 | 500..=599 => Attempt::Retry(ProviderError::Transport(format!("http {status}: {}", snippet(&text)))),
            _ => Attempt::Fatal(ProviderError::InvalidRequest(format!(
                "http {status}: {}",
                snippet(&text)
            ))),
        }
    }
}

fn transient(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed | ureq::Error::Protocol(_)
    )
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_request_serializes_the_wire_fields() {
        let client = ChatClient::new(LiveConfig::new("http://localhost:1/v1", "k"));
        let v = serde_json::to_value(client.chat_request("hi", 0.7, 5)).unwrap();
        assert_eq!(v["n"], 5);
        assert_eq!(v["temperature"], 0.7);
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "hi");
        assert!(v["model"].is_string() && v["max_tokens"].is_number());
    }

    #[test]
    fn zero_completions_is_rejected_locally() {
        let client = ChatClient::new(LiveConfig::new("http://localhost:1/v1", "k"));
        let err = client.chat(&client.chat_request("hi", 0.0, 0)).unwrap_err();
        assert!(matches!(err, ProviderError::InvalidRequest(_)));
        assert_eq!(client.counters().attempts, 0);
    }
}
