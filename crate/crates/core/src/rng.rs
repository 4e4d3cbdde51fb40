//! Seeded random streams. Each purpose gets its own ChaCha stream so that, for
//! example, changing the epoch count never alters the train/test split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Init,
    /// Shuffle order of the given (0-based) epoch.
    Epoch(u64),
    Synthetic,
    /// Finite-difference check number `n`.
    GradCheck(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::Init => 2,
            Stream::Synthetic => 3,
            Stream::Epoch(e) => 1024 + e,
            Stream::GradCheck(n) => (1 << 48) + n,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
