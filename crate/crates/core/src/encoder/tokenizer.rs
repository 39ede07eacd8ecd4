use serde::{Deserialize, Serialize};

use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub hash_vocab_size: usize,
    pub max_length: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            hash_vocab_size: 32768,
            max_length: 128,
        }
    }
}

impl TokenizerConfig {
    pub fn is_valid(&self) -> bool {
        self.hash_vocab_size >= 2 && self.max_length >= 1
    }
}

// 64-bit FNV-1a; stable across platforms and toolchains, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn token_id(token: &str, cfg: &TokenizerConfig) -> u32 {
    (fnv1a(token.as_bytes()) % cfg.hash_vocab_size as u64) as u32
}

/// Hashes normalized tokens into `[0, hash_vocab_size)`, keeping the last
/// `max_length` tokens when the text is longer.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<u32> {
    let tokens = text::normalize(text);
    let start = tokens.len().saturating_sub(cfg.max_length);
    tokens[start..].iter().map(|t| token_id(t, cfg)).collect()
}
