//! Sampler, embedder and verifier interfaces, plus the offline providers:
//! a seeded synthetic task environment and a feature-hashing embedder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ProblemSpec, Verdict};

pub mod hash_embed;
pub mod synthetic;

pub use hash_embed::{hash_embed, HashEmbedder, HASH_EMBED_DIM};
pub use synthetic::{SyntheticProvider, SyntheticStep, SyntheticTask};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("text was not produced by this environment: {0:?}")]
    UnknownText(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Note attached to a re-execution after a failed verification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementNote {
    pub previous_answer: String,
    pub verdict: String,
    pub failure_reason: String,
    pub root_cause: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    /// Workflow position being executed.
    pub position: usize,
    pub horizon: usize,
    /// Live outputs of earlier positions.
    pub upstream: BTreeMap<usize, String>,
    /// Answers already rejected at this position.
    pub avoid: Vec<String>,
    pub refinement: Option<RefinementNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerRequest {
    pub prompt: String,
    pub temperature: f64,
    pub n: usize,
    pub seed: Option<u64>,
    pub context: StepContext,
}

impl SamplerRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.n == 0 {
            return Err(ProviderError::InvalidRequest("n must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// A step output a sample declares it consumed, with the text it consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub producer: usize,
    pub consumed: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub references: Vec<Reference>,
    /// Structured slot values, when the provider extracts them.
    pub slots: Option<BTreeMap<String, String>>,
    /// Slot extraction was attempted and failed.
    #[serde(default)]
    pub slot_parse_failed: bool,
}

impl Sample {
    pub fn text(text: impl Into<String>) -> Self {
        Sample {
            text: text.into(),
            ..Sample::default()
        }
    }
}

pub trait Sampler: Send + Sync {
    fn sample(&self, problem: &ProblemSpec, request: &SamplerRequest) -> Result<Vec<Sample>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRequest<'a> {
    pub problem_id: &'a str,
    pub texts: &'a [String],
    pub seed: u64,
}

pub trait Embedder: Send + Sync {
    /// One unit vector per input text.
    fn embed(&self, request: &EmbedRequest<'_>) -> Result<Vec<Vec<f64>>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRequest<'a> {
    pub problem: &'a ProblemSpec,
    pub position: usize,
    pub terminal: bool,
    pub answer: &'a str,
}

pub trait Verifier: Send + Sync {
    fn verify(&self, request: &VerifyRequest<'_>) -> Result<Verdict, ProviderError>;
}

/// Borrowed provider triple handed to the engine.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub sampler: &'a dyn Sampler,
    pub embedder: &'a dyn Embedder,
    pub verifier: &'a dyn Verifier,
}

impl<'a> Providers<'a> {
    pub fn new(sampler: &'a dyn Sampler, embedder: &'a dyn Embedder, verifier: &'a dyn Verifier) -> Self {
        Providers {
            sampler,
            embedder,
            verifier,
        }
    }
}

/// Folds values into one well-mixed seed (splitmix64 finaliser per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_is_order_sensitive() {
        assert_eq!(mix_seed(&[1, 2]), mix_seed(&[1, 2]));
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn request_validation() {
        let mut r = SamplerRequest {
            prompt: String::new(),
            temperature: 0.7,
            n: 0,
            seed: None,
            context: StepContext::default(),
        };
        assert!(r.validate().is_err());
        r.n = 1;
        assert!(r.validate().is_ok());
        r.temperature = -1.0;
        assert!(r.validate().is_err());
    }
}
