//! Deterministic seed derivation.
//!
//! A stream seed is derived from a master seed and an ordered list of 64-bit
//! fields: `h = mix(master)`, then `h = mix(h ^ field)` for each field, where
//! `mix` is the SplitMix64 finalizer applied after adding the golden-ratio
//! increment. The harness uses fields `(snr_db.to_bits(), trial, purpose)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 step.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `fields` into `master`.
pub fn derive(master: u64, fields: &[u64]) -> u64 {
    fields
        .iter()
        .fold(splitmix64(master), |h, &f| splitmix64(h ^ f))
}

/// What a derived random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Channel = 1,
    Bits = 2,
    Noise = 3,
    Diagnostic = 4,
}

/// RNG for one `(snr, trial, purpose)` stream.
pub fn trial_rng(master: u64, snr_db: f64, trial: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, &[snr_db.to_bits(), trial, purpose as u64]))
}
