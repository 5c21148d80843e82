//! Seeded substreams and the few distributions the sampler draws from.
//!
//! ChaCha is counter based, so a `(seed, stream)` pair names an independent
//! sequence regardless of which thread consumes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub type ChainRng = ChaCha8Rng;

/// Generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw from `IG(shape, rate)`, i.e. `1 / Gamma(shape, scale = 1 / rate)`.
pub fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}
