use std::time::Duration;

use riskloop_core::providers::ProviderError;

pub const ENV_API_BASE: &str = "RISKLOOP_API_BASE";
pub const ENV_API_KEY: &str = "RISKLOOP_API_KEY";
pub const ENV_CHAT_MODEL: &str = "RISKLOOP_CHAT_MODEL";
pub const ENV_EMBED_MODEL: &str = "RISKLOOP_EMBED_MODEL";

pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_CHAT_MODEL: &str = "gpt-4o-mini";

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// Base URL up to and including the version segment, without a trailing slash.
    pub api_base: String,
    pub api_key: String,
    pub chat_model: String,
    /// Remote embedding model; `None` falls back to local feature hashing.
    pub embed_model: Option<String>,
    pub max_tokens: u32,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl LiveConfig {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>) -> Self {
        LiveConfig {
            api_base: api_base.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            chat_model: DEFAULT_CHAT_MODEL.to_string(),
            embed_model: None,
            max_tokens: 1024,
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Same as [`LiveConfig::from_env`] with an arbitrary variable source.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        let get = |k: &str| lookup(k).map(|v| v.trim().to_string()).filter(|v| !v.is_empty());
        let key = get(ENV_API_KEY).ok_or_else(|| ProviderError::Auth(format!("{ENV_API_KEY} is not set")))?;
        let mut cfg = LiveConfig::new(get(ENV_API_BASE).unwrap_or_else(|| DEFAULT_API_BASE.to_string()), key);
        if let Some(m) = get(ENV_CHAT_MODEL) {
            cfg.chat_model = m;
        }
        cfg.embed_model = get(ENV_EMBED_MODEL);
        Ok(cfg)
    }
}
