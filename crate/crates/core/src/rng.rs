//! Seeded random sources shared by data generation, initialization and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Mat;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// i.i.d. standard normal matrix, filled in column-major order.
pub fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| gaussian(rng)).collect();
    Mat::from_col_major(rows, cols, data).expect("gaussian samples are finite")
}

/// Gaussian matrix with every column scaled to unit 2-norm.
pub fn unit_column_mat(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let mut m = gaussian_mat(rng, rows, cols);
    for j in 0..cols {
        let norm = m.col_norm(j);
        m.col_mut(j).iter_mut().for_each(|v| *v /= norm);
    }
    m
}
