// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic hashed text encoders.
//!
//! Two flavours share one tokenizer: dense per-word vectors (the backbone's
//! prompt tokens) and a signed feature-hashing bag of words (the text side of
//! the router classifier and of the CLIP-T stand-in).

use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// FNV-1a of `seed` followed by the bytes of `s`.
pub fn stable_hash(s: &str, seed: u64) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(s.as_bytes());
    h.finish()
}

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` standard-normal samples from a ChaCha8 stream seeded with `seed`.
pub fn gaussian_vec(seed: u64, n: usize, scale: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect()
}

/// In-place L2 normalization; zero vectors stay zero.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

/// Unit-norm pseudo-random vector for one word.
pub fn word_vector(word: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut v = gaussian_vec(stable_hash(word, seed), dim, 1.0);
    l2_normalize(&mut v);
    v
}

/// Maps text into a fixed-dimensional space; outputs are unit length, or all
/// zeros for text without words.
pub trait TextEmbedder: Send + Sync {
    /// Identifier written into report headers.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Vec<f32>;
}

/// Signed feature hashing of words, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBow {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedBow {
    fn default() -> Self {
        Self {
            dim: 256,
            seed: 0xC11F_7E47,
        }
    }
}

impl TextEmbedder for HashedBow {
    fn id(&self) -> String {
        format!("hashed-bow(dim={},seed={})", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for w in words(text) {
            let h = stable_hash(&w, self.seed);
            let idx = (h % self.dim as u64) as usize;
            v[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        l2_normalize(&mut v);
        v
    }
}
