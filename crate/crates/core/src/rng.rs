//! Seeded random streams.
//!
//! Every stochastic routine draws from ChaCha20 keyed by the run seed. Work
//! items (trajectories, masks, sampler chains) get their own stream number,
//! so results do not depend on how the work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identifier written next to generated artifacts.
pub const RNG_ALGORITHM: &str = "chacha20/seed_from_u64/stream-per-item";

/// Independent stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sub-stream `k` (0..4) of work item `index`.
pub(crate) fn item_stream(seed: u64, index: u64, k: u64) -> ChaCha20Rng {
    debug_assert!(k < 4);
    stream(seed, (index << 2) | k)
}

pub(crate) fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
