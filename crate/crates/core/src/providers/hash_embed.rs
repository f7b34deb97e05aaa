//! Deterministic feature-hashing embedder: lowercase alphanumeric tokens
//! hashed into 384 buckets, counted, then normalised.

use super::{fnv1a, EmbedRequest, Embedder, ProviderError};
use crate::sensing::normalize;

pub const HASH_EMBED_DIM: usize = 384;

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn bucket(token: &str) -> usize {
    (fnv1a(token.as_bytes()) % HASH_EMBED_DIM as u64) as usize
}

pub fn hash_embed(text: &str) -> Result<Vec<f64>, ProviderError> {
    let mut v = vec![0.0; HASH_EMBED_DIM];
    let mut any = false;
    for t in tokens(text) {
        v[bucket(&t)] += 1.0;
        any = true;
    }
    if !any {
        return Err(ProviderError::InvalidRequest("cannot embed text without tokens".into()));
    }
    normalize(&mut v);
    Ok(v)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl Embedder for HashEmbedder {
    fn embed(&self, request: &EmbedRequest<'_>) -> Result<Vec<Vec<f64>>, ProviderError> {
        request.texts.iter().map(|t| hash_embed(t)).collect()
    }
}
