//! Text embeddings and similarity.
//!
//! The reference embedder hashes lowercase word tokens into a fixed number of
//! buckets and L2-normalizes the counts. It has no model dependency and is
//! deterministic across platforms, which lets tests hand-compute rankings.
//! Real embedding providers plug in behind [`Embedder`].

use std::collections::BTreeSet;

pub const DEFAULT_DIMENSIONS: usize = 256;

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    pub dimensions: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dimensions: DEFAULT_DIMENSIONS }
    }
}

impl Embedder for HashedBagOfWords {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimensions.max(1)];
        for token in tokenize(text) {
            let bucket = (fnv1a(token.as_bytes()) % v.len() as u64) as usize;
            v[bucket] += 1.0;
        }
        normalize(&mut v);
        v
    }
}

/// Lowercased alphanumeric runs. `_` counts as part of a word so that
/// identifiers such as `params_file` stay whole.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; zero when either vector is zero or lengths differ.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else if a == b {
        1.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
