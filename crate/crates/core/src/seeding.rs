//! Derivation of child seeds from a master seed and integer coordinates.
//!
//! The mix is SplitMix64 folded over the parts, which is stable across
//! platforms and toolchains (unlike `std`'s hashers).

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit digest of `master` and `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc.rotate_left(23) ^ splitmix64(p)))
}
