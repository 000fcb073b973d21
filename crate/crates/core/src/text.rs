//! Deterministic hashing tokenizer: whitespace tokens are mapped to seeded
//! Gaussian embedding rows, so the same text and seed always produce the
//! same M×d embedding. This stands in for a real subword tokenizer, which
//! the alignment math is agnostic to.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokenlens_autograd::Tensor;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot embed empty text")]
    EmptyText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding {
    /// M×d, one row per whitespace token.
    pub tokens: Tensor,
    pub source_text: String,
}

impl InstructionEmbedding {
    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }
}

/// 32-byte RNG seed from (seed, token) via SHA-256.
fn token_key(seed: u64, token: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    hasher.finalize().into()
}

/// Stable 64-bit digest of arbitrary text, used to derive per-instruction
/// seeds elsewhere.
pub fn text_hash64(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Embedding row for one token: d standard normal draws from a ChaCha stream
/// keyed by (seed, token).
pub fn token_embedding(token: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::from_seed(token_key(seed, token));
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn embed_text(text: &str, d: usize, seed: u64) -> Result<InstructionEmbedding, TextError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(TextError::EmptyText);
    }
    let mut data = Vec::with_capacity(tokens.len() * d);
    for tok in &tokens {
        data.extend(token_embedding(tok, d, seed));
    }
    Ok(InstructionEmbedding {
        tokens: Tensor::new(vec![tokens.len(), d], data).expect("embedding data consistent"),
        source_text: text.to_string(),
    })
}
