//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream selected by a
//! base seed plus a small tuple of indices (purpose, trial, sub-trial). Two
//! runs with the same seed therefore see the same numbers regardless of the
//! order in which trials are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; keeps e.g. secondary data and test vectors of the same
/// trial on disjoint streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    TestVector = 2,
    Texture = 3,
    Probe = 4,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = splitmix64(splitmix64(splitmix64(purpose as u64) ^ a) ^ b.rotate_left(17));
    rng.set_stream(id);
    rng
}
