//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single run seed through
//! [`mix`], so data generation, parameter init, and drop masks are
//! reproducible across runs and platforms. The mixer is the standard
//! splitmix64 finalizer; the initial state is an arbitrary odd constant.

/// splitmix64 step: advances `x` by the golden-ratio increment and applies
/// the standard 64-bit finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of components into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut s: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// Seed for the drop mask of one expert's domain vector at one training step.
pub fn mask_seed(rng_seed: u64, layer: usize, expert: usize, step: usize) -> u64 {
    mix(&[rng_seed, layer as u64, expert as u64, step as u64])
}

/// FNV-1a over raw bytes; used to fingerprint configurations.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
