//! Counter-based seed derivation.
//!
//! Sub-seeds are obtained by folding a list of 64-bit words through the
//! splitmix64 finalizer. String labels are first reduced with FNV-1a.

/// Name of the mixing function, recorded in run manifests.
pub const MIX_NAME: &str = "splitmix64-fold/fnv1a64";

/// One round of the splitmix64 generator applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Folds `words` into a single seed.
pub fn derive(words: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C909u64;
    for &w in words {
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

/// Seed roles used when splitting a run seed.
pub mod role {
    pub const DATASET: u64 = 1;
    pub const RUN: u64 = 2;
    pub const QMC_STEP: u64 = 3;
    pub const QMC_FORECAST: u64 = 4;
    pub const QMC_ANALYSIS: u64 = 5;
    pub const REFERENCE: u64 = 6;
    pub const QMC_INIT: u64 = 7;
}
