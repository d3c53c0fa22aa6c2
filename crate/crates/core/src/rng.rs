//! Keyed, counter-based random streams.
//!
//! Every stochastic draw in the toolkit comes from a stream keyed by a tuple
//! of 64-bit words (for example `(rng_salt, seed)` for one image generation).
//! The stream itself is ChaCha8, whose output is a pure function of key and
//! block counter, so draws never depend on scheduling or thread count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed. Order-sensitive.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x6A09_E667_F3BC_C908u64 ^ parts.len() as u64;
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Random stream keyed by a tuple of words.
#[derive(Clone, Debug)]
pub struct KeyedRng(ChaCha8Rng);

impl KeyedRng {
    pub fn new(key: &[u64]) -> Self {
        let mut seed = [0u8; 32];
        let mut state = derive_seed(key);
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        KeyedRng(ChaCha8Rng::from_seed(seed))
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(&[seed])
    }
}

impl RngCore for KeyedRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
