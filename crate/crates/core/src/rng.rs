//! Counter-based deterministic random source.
//!
//! Draw `n` (1-based) of a generator with key `k` is `mix64(k + n * GAMMA)`,
//! where `mix64` is the SplitMix64 finalizer. The key of a root generator is
//! `mix64(seed ^ ROOT_DOMAIN)`; a labelled sub-stream gets
//! `mix64(parent_key ^ mix64(fnv1a64(label)))` and starts at counter zero, so
//! it depends only on the parent's key and the label, never on how many draws
//! the parent has made. All arithmetic is wrapping `u64`, so sequences are
//! identical on every platform.

use rand::RngCore;

use crate::error::{NavError, Result};

/// Weyl increment (2^64 / golden ratio).
pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// Domain separator for root keys.
pub const ROOT_DOMAIN: u64 = 0x5041_5448_4E41_5631;
const MIX_M1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_M2: u64 = 0x94D0_49BB_1331_11EB;
const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_M1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_M2);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicRng {
    seed: u64,
    key: u64,
    counter: u64,
}

impl DeterministicRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: mix64(seed ^ ROOT_DOMAIN),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive_substream(&self, label: &str) -> Result<Self> {
        if label.is_empty() {
            return Err(NavError::InvalidArgument(
                "sub-stream label must be nonempty".into(),
            ));
        }
        Ok(Self {
            seed: self.seed,
            key: mix64(self.key ^ mix64(fnv1a64(label.as_bytes()))),
            counter: 0,
        })
    }

    /// Infallible variant for internally generated labels.
    pub fn sub(&self, label: &str) -> Self {
        self.derive_substream(label)
            .expect("internal sub-stream labels are nonempty")
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi].
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

impl RngCore for DeterministicRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
