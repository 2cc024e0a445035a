//! Seeded, portable random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream)`, so
//! independent components never share generator state and results do not
//! depend on call interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids so that components stay decorrelated.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const EVAL_DATA: u64 = 5;
    pub const GENERATOR: u64 = 6;
    pub const BASELINE_INIT: u64 = 7;
    pub const BASELINE_DATA: u64 = 8;
    pub const CORPUS: u64 = 9;
}
