//! Seed derivation and reproducible random streams.
//!
//! Every random decision in the crate is drawn from a [`ChaCha8Rng`] stream
//! whose 64-bit seed is derived from a base seed and a list of tags via a
//! SplitMix64-style mixer. Streams are cheap to reconstruct, and a stream's
//! position can be captured and restored exactly, which is what checkpoints
//! store.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mix one 64-bit word into a running seed (SplitMix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a sequence of tags.
///
/// Distinct tag sequences give statistically independent child seeds;
/// identical inputs always give the same output.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// Convenience for string tags (hashed into a u64 first).
pub fn tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Build a ChaCha8 stream from a 64-bit seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact position of a ChaCha8 stream, serializable for checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed_hex: String,
    /// Word position split into two u64 halves (low, high).
    pub word_pos: (u64, u64),
}

impl StreamState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        StreamState {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: (pos as u64, (pos >> 64) as u64),
        }
    }

    pub fn restore(&self) -> crate::error::Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(crate::error::Error::Data(format!(
                "rng seed must be 32 hex-encoded bytes, got {} chars",
                self.seed_hex.len()
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk)
                .ok()
                .and_then(|s| u8::from_str_radix(s, 16).ok())
                .ok_or_else(|| {
                    crate::error::Error::Data(format!("invalid rng seed hex: {}", self.seed_hex))
                })?;
            seed[i] = s;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let pos = (self.word_pos.0 as u128) | ((self.word_pos.1 as u128) << 64);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
