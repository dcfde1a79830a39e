//! Seed splitting.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! single top-level seed: the seed keys the generator and the consumer's
//! [`Stream`] id selects the ChaCha stream. Adding a consumer never shifts
//! the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Extractor = 2,
    Classifier = 3,
    Stage1 = 4,
    Stage2 = 5,
    Holdout = 6,
    Eval = 7,
    GradCheck = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    sub_stream(seed, which as u64)
}

/// Stream for an indexed sub-consumer, e.g. the `i`-th evaluation task.
pub fn indexed(seed: u64, which: Stream, index: u64) -> Rng {
    sub_stream(seed, ((which as u64) << 40) | (index + 1))
}

fn sub_stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
