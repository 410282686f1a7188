//! Seeded random sources shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random source used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Creates a generator for `seed` on an independent `stream`.
///
/// Streams let a single user seed fan out into reproducible, non-overlapping
/// sequences (one per task, per chain, ...).
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with standard-normal draws.
pub fn fill_normal(rng: &mut Rng, out: &mut [f32]) {
    use rand::Rng as _;
    for v in out.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
}
