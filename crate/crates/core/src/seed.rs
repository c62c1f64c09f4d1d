//! Order-independent seed derivation.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Per-sample seed: depends only on `(master, pair_id, iteration, stream)`.
pub fn sample_seed(master: u64, pair_id: u64, iteration: u64, stream: u64) -> u64 {
    derive(&[master, pair_id, iteration, stream])
}

/// Named sub-streams so different consumers of one sample never share draws.
pub mod stream {
    pub const GT: u64 = 1;
    pub const DISTURBANCE: u64 = 2;
    pub const CORPUS: u64 = 3;
    pub const TEST_SET: u64 = 4;
    pub const QAM: u64 = 5;
    pub const REGRESSOR: u64 = 6;
}
