//! Deterministic named RNG sub-streams.
//!
//! All randomness flows from one base seed. Components draw from named
//! sub-streams (`world`, `init`, `data`, `mlm`, `queue`, `dropout`) so each
//! can be varied independently without disturbing the others. Seeding is
//! platform-stable: no reliance on `std` hashers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to fold stream names into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// 32-byte seed derived from (base seed, stream name).
pub fn stream_seed(base: u64, name: &str) -> [u8; 32] {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&base.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    seed[16..24].copy_from_slice(&(name.len() as u64).to_le_bytes());
    seed[24..32].copy_from_slice(&base.rotate_left(17).to_le_bytes());
    seed
}

/// A fresh ChaCha stream for `(base, name)`.
pub fn substream(base: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(base, name))
}

/// Serializable snapshot of a ChaCha stream (seed + word position).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: [u64; 2],
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos: [pos as u64, (pos >> 64) as u64],
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        let pos = (self.word_pos[0] as u128) | ((self.word_pos[1] as u128) << 64);
        rng.set_word_pos(pos);
        rng
    }
}
