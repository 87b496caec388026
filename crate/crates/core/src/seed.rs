//! Seed splitting.
//!
//! Every random stream in a run is derived from the single user seed as
//! `splitmix64(seed ^ splitmix64(stream_tag))`, where the tag is one of the
//! constants below (plus an index such as the epoch for per-epoch streams).
//! Streams are therefore independent of the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 0x01;
pub const STREAM_CENTROIDS: u64 = 0x02;
pub const STREAM_SHUFFLE: u64 = 0x100;
pub const STREAM_AUGMENT: u64 = 0x200;
pub const STREAM_DATA: u64 = 0x03;
pub const STREAM_GRADCHECK: u64 = 0x04;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
