use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Independent, reproducible generator for work item `stream` under `seed`.
///
/// Parallel loops split their work into fixed-size blocks and give each block
/// its own stream, so results do not depend on the thread count.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Work is split into blocks of this many items for seeded parallel loops.
pub const BLOCK: usize = 1024;
