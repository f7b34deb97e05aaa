//! OpenAI-compatible chat and embeddings adapter for the riskloop engine.
//!
//! [`LiveConfig::from_env`] reads the endpoint, credential and model names;
//! [`LiveProvider`] implements the engine's sampler, embedder and verifier
//! interfaces on top of a retrying [`ChatClient`].

pub mod client;
pub mod config;
pub mod prompts;
pub mod provider;

pub use client::{CallCounters, ChatClient, ChatRequest, Message};
pub use config::LiveConfig;
pub use provider::{
    detect_references, parse_understanding, parse_verdict, LiveProvider, LiveProviderOptions, ReferenceVerifier,
};
