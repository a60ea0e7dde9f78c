//! Signed feature hashing over token unigrams and bigrams.
//!
//! The scheme, fixed so it can be re-derived independently:
//!
//! 1. tokens = [`tokenize_with_sentinels`] of the text;
//! 2. grams = every token, then every adjacent pair joined by one space;
//! 3. for each gram `g`: `bucket = fnv(g, seed) % dim` and the sign is `+1`
//!    when the top bit of `fnv(g, seed ^ SIGN_KEY)` is clear, `-1` otherwise;
//! 4. the signed counts are L2-normalised.
//!
//! `fnv(s, key)` is 64-bit FNV-1a over the UTF-8 bytes of `s`, started from
//! `FNV_OFFSET ^ key.wrapping_mul(KEY_MIX)`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize_with_sentinels;
use crate::math::SparseVec;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const KEY_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
pub const SIGN_KEY: u64 = 0x5bd1_e995_5bd1_e995;

pub fn fnv(s: &str, key: u64) -> u64 {
    let mut h = FNV_OFFSET ^ key.wrapping_mul(KEY_MIX);
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bucket and sign for one hashed feature string.
pub fn hashed_slot(feature: &str, seed: u64, dim: usize) -> (u32, f64) {
    let bucket = (fnv(feature, seed) % dim as u64) as u32;
    let sign = if fnv(feature, seed ^ SIGN_KEY) >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Signed-hashes feature strings and L2-normalises the result.
pub fn hash_features<'a>(features: impl IntoIterator<Item = &'a str>, seed: u64, dim: usize) -> SparseVec {
    let pairs = features
        .into_iter()
        .map(|f| hashed_slot(f, seed, dim))
        .collect();
    SparseVec::from_pairs(pairs).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub seed: u64,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// The normalised string the features are computed from.
    pub fn normalize(text: &str) -> String {
        tokenize_with_sentinels(text).join(" ")
    }

    pub fn features(&self, text: &str) -> SparseVec {
        let tokens = tokenize_with_sentinels(text);
        let bigrams: Vec<String> = tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])).collect();
        hash_features(
            tokens.iter().map(String::as_str).chain(bigrams.iter().map(String::as_str)),
            self.seed,
            self.dim,
        )
    }

    pub fn featurize(&self, text: &str) -> Array1<f64> {
        self.features(text).to_dense(self.dim)
    }
}
