//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the user seed, with the
//! 64-bit stream id `run · 16 + purpose`. ChaCha is counter based, so
//! streams are independent of each other and of thread scheduling, and the
//! same seed yields the same numbers on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    OfflineInput = 0,
    OfflineDisturbance = 1,
    OfflineNoise = 2,
    OnlineNoise = 3,
    OnlineDisturbance = 4,
    Query = 5,
    Test = 15,
}

pub fn stream(seed: u64, run: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run.wrapping_mul(16).wrapping_add(purpose as u64));
    rng
}
