//! Seed derivation.
//!
//! Every random stream in the toolkit descends from one root seed. A stream is
//! identified by a purpose label and an index, so splits, initialization,
//! augmentation and masking can each be reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed for `(purpose, index)` from `root`.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let a = splitmix64(root ^ fnv1a(purpose));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// A generator for the stream `(purpose, index)` under `root`.
pub fn stream(root: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, purpose, index))
}
