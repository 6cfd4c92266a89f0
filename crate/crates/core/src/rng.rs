//! Counter-based seed splitting.
//!
//! Every consumer of randomness asks for a generator keyed by
//! `(global seed, subsystem, counter)`. Keys map onto ChaCha stream ids, so a
//! component can be re-run on its own and still see exactly the numbers it
//! would have seen inside the full pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams drawn from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Subsystem {
    Init = 1,
    Synth = 2,
    Folds = 3,
    Shuffle = 4,
    Mask = 5,
    Augment = 6,
    EvalMask = 7,
    ClipOffset = 8,
    Probe = 9,
    Subsample = 10,
}

pub fn stream(seed: u64, subsystem: Subsystem, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subsystem as u64) << 48) | (counter & 0xFFFF_FFFF_FFFF));
    rng
}
