//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the run seed. Child streams
//! share the key and differ only in the 64-bit ChaCha stream id, which is
//! derived from the parent's stream id, a domain tag and an index:
//!
//! ```text
//! child.stream = splitmix64(splitmix64(parent.stream ^ tag) ^ index)
//! ```
//!
//! ChaCha keystreams with distinct stream ids are independent, so for example
//! the two dropout views of a sentence (`derive(DROPOUT_VIEW, 0)` and
//! `derive(DROPOUT_VIEW, 1)`) never share randomness.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Domain tags for [`Rng::derive`].
pub mod domain {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const STEP: u64 = 0x5354_4550;
    pub const DROPOUT_VIEW: u64 = 0x5649_4557;
    pub const KMEANS: u64 = 0x4b4d_4e53;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position in the keystream, as a decimal string (it is a u128).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
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

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; does not advance `self`.
    pub fn derive(&self, tag: u64, index: u64) -> Rng {
        let stream = splitmix64(splitmix64(self.inner.get_stream() ^ tag) ^ index);
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, stream: self.inner.get_stream(), word_pos: self.inner.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { seed: state.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * bound
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index drawn with probability proportional to `weights` (all ≥ 0, not all zero).
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = Some(i);
                if target < acc {
                    return Some(i);
                }
            }
        }
        last_positive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_and_are_reproducible() {
        let root = Rng::new(1);
        let mut z = root.derive(domain::DROPOUT_VIEW, 0);
        let mut z2 = root.derive(domain::DROPOUT_VIEW, 1);
        let mut z_again = root.derive(domain::DROPOUT_VIEW, 0);
        let (x, y, w) = (z.next_u64(), z2.next_u64(), z_again.next_u64());
        assert_ne!(x, y);
        assert_eq!(x, w);
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(3).derive(domain::STEP, 5);
        a.next_u64();
        let state = a.state();
        let json = serde_json::to_string(&state).unwrap();
        let mut b = Rng::from_state(serde_json::from_str(&json).unwrap());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn weighted_index_skips_zero_weights() {
        let mut r = Rng::new(0);
        for _ in 0..100 {
            assert_eq!(r.weighted_index(&[0.0, 2.0, 0.0]), Some(1));
        }
        assert_eq!(r.weighted_index(&[0.0, 0.0]), None);
    }
}
