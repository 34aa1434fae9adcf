//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every randomized routine in this crate takes an explicit `u64` seed and
//! derives the streams it needs through [`derive_seed`], so results never
//! depend on worker count or task ordering. Task seeds are produced by a
//! stable FNV-1a hash of the (master seed, image id, fold, k) tuple, which is
//! identical across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hasher over raw bytes.
#[derive(Debug, Clone)]
pub struct StableHasher(u64);

impl StableHasher {
    pub fn new() -> Self {
        StableHasher(FNV_OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    /// Length-prefixed so that adjacent strings cannot collide by shifting.
    pub fn write_str(&mut self, s: &str) {
        self.write_u64(s.len() as u64);
        self.write(s.as_bytes());
    }

    pub fn finish(&self) -> u64 {
        // Final mix spreads low-entropy inputs over all 64 bits.
        splitmix64(self.0)
    }
}

impl Default for StableHasher {
    fn default() -> Self {
        Self::new()
    }
}

/// Seed for one (image, fold, k) task, independent of scheduling order.
pub fn task_seed(master_seed: u64, image_id: &str, fold: usize, k: usize) -> u64 {
    let mut h = StableHasher::new();
    h.write_u64(master_seed);
    h.write_str(image_id);
    h.write_u64(fold as u64);
    h.write_u64(k as u64);
    h.finish()
}

/// Derive an independent sub-stream seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Deterministic generator for a given seed; identical on every platform.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
