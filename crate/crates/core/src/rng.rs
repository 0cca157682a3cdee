//! Seeded random substreams.
//!
//! A single master seed fans out to named substreams (`split`, `init`,
//! `shuffle`, `augment`, `bootstrap`, ...) so each component draws from its
//! own deterministic stream regardless of how many draws the others consume.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    let mut h = hash;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Collapse a master seed and a stream name into a derived seed.
pub fn derive_seed(master_seed: u64, name: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET, name.as_bytes());
    fnv1a(h, &master_seed.to_le_bytes())
}

/// Derived seed further separated by an index (per-epoch, per-resample, ...).
pub fn derive_seed_indexed(master_seed: u64, name: &str, index: u64) -> u64 {
    fnv1a(derive_seed(master_seed, name), &index.to_le_bytes())
}

/// A named substream of the master seed.
pub fn substream(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, name))
}

/// A named, indexed substream of the master seed.
pub fn substream_indexed(master_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master_seed, name, index))
}

/// One standard-normal draw via Box-Muller on the stream's uniforms.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One draw from a normal distribution truncated to two standard deviations,
/// scaled by `std`.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
