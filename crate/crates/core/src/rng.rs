//! Counter-based stream derivation.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose seed is a
//! hash of `(root, key...)`. Streams are independent of evaluation order, so
//! concurrent per-cell work replays bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_SINGLE: u64 = 0x5349_4e47;
pub(crate) const TAG_CENTER: u64 = 0x4345_4e54;
pub(crate) const TAG_KERNEL_POINTS: u64 = 0x4b50_4e54;
pub(crate) const TAG_KERNEL_LABELS: u64 = 0x4b4c_424c;
pub(crate) const TAG_MONTE_CARLO: u64 = 0x4d43_4556;
pub(crate) const TAG_ORACLE: u64 = 0x4f52_434c;
pub(crate) const TAG_SIGMA: u64 = 0x5349_474d;
pub(crate) const TAG_HOLDER: u64 = 0x484f_4c44;
pub(crate) const TAG_MARGIN: u64 = 0x4d52_474e;
pub(crate) const TAG_EVAL: u64 = 0x4556_414c;
pub(crate) const TAG_BOOTSTRAP: u64 = 0x424f_4f54;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit seed.
pub fn derive_seed(root: u64, key: &[u64]) -> u64 {
    let mut h = splitmix(root);
    for (i, &k) in key.iter().enumerate() {
        h = splitmix(h ^ k.rotate_left((i as u32 * 17) % 64) ^ (i as u64 + 1));
    }
    h
}

pub fn stream(root: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, key))
}
