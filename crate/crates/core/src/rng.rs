//! Seeded random streams. Every random draw in the crate comes from a
//! ChaCha8 generator keyed by one of the configured seeds plus a stream id,
//! so independent consumers of the same seed never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TEACHER_INIT: u64 = 1;
pub const STUDENT_INIT: u64 = 2;
pub const AUX_HEAD_INIT: u64 = 3;
pub const BANK_INIT: u64 = 4;
pub const PROBE_INIT: u64 = 5;
pub const DATA: u64 = 6;
/// Shuffling uses `SHUFFLE_BASE + epoch`.
pub const SHUFFLE_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A `u64` seed for a consumer that takes a bare seed (such as
/// `Model::init`), drawn from the given stream.
pub fn derive_seed(seed: u64, stream_id: u64) -> u64 {
    use rand::RngCore;
    stream(seed, stream_id).next_u64()
}
