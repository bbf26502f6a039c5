//! Seeded randomness. Every stochastic routine in the crate draws from a
//! ChaCha stream created here so results are reproducible across platforms.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}
