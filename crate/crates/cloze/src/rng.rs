//! Seeded randomness. ChaCha8 everywhere so runs are reproducible across
//! platforms and rand versions; independent sub-streams are derived per
//! record / batch element to keep parallel generation deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Root stream for a given seed.
pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of the root stream for `seed`.
pub fn rng_substream(seed: u64, index: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Standard normal sample via Box-Muller.
pub fn sample_normal(rng: &mut SeededRng) -> f64 {
    // u1 in (0,1] avoids ln(0)
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a slice with standard normal samples.
pub fn fill_normal(rng: &mut SeededRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = sample_normal(rng);
    }
}
