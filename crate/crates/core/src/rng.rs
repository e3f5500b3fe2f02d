//! Seeded random streams. Every stochastic component owns a generator derived
//! from a run seed and a fixed stream tag, so results are bit-reproducible.

use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, tag: u64) -> Rng64 {
    let mut rng = Rng64::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn normal_matrix(rng: &mut Rng64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
