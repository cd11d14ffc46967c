//! Deterministic, splittable random streams.
//!
//! Every stream is a ChaCha20 keystream keyed by a 64-bit seed and selected by
//! a 64-bit stream id. Two streams with the same `(seed, stream)` pair produce
//! the same sequence on every platform; distinct stream ids address disjoint
//! keystreams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALGORITHM_ID: &str = "chacha20";

/// Upper bound on rejection attempts for [`RngStream::truncated_normal`].
const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: AlgorithmId,
    pub seed: u64,
    pub stream: u64,
    /// Keystream word position, stored as a decimal string because it is 128-bit.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmId {
    Chacha20,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream for `child`, keyed by the same seed. The child starts at
    /// the beginning of its own keystream regardless of this stream's position.
    pub fn split(&self, child: u64) -> Self {
        let id = splitmix64(self.stream ^ splitmix64(child.wrapping_add(1)));
        Self::new(self.seed, id)
    }

    pub fn state(&self) -> RngState {
        RngState {
            algorithm: AlgorithmId::Chacha20,
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Sample of `N(mean, sd²)` conditioned on being strictly positive.
    pub fn truncated_normal(&mut self, mean: f64, sd: f64) -> Result<f64> {
        if !(sd > 0.0) {
            return Err(Error::domain(format!("standard deviation must be positive, got {sd}")));
        }
        if mean + 6.0 * sd <= 0.0 {
            return Err(Error::RejectionBudget(format!(
                "N({mean}, {sd}^2) has negligible mass above zero"
            )));
        }
        for _ in 0..MAX_REJECTIONS {
            let v = self.normal(mean, sd);
            if v > 0.0 {
                return Ok(v);
            }
        }
        Err(Error::RejectionBudget(format!(
            "no positive draw from N({mean}, {sd}^2) in {MAX_REJECTIONS} attempts"
        )))
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Free-function form of [`RngStream::truncated_normal`].
pub fn sample_truncated_gaussian(rng: &mut RngStream, mean: f64, sd: f64) -> Result<f64> {
    rng.truncated_normal(mean, sd)
}
