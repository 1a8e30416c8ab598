//! Random fixtures for unit tests.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::attnpool::AttnPoolWeights;
use crate::scalar::Scalar;

fn uniform<T: Scalar, R: Rng>(rng: &mut R, scale: f64) -> T {
    T::lit(rng.gen_range(-1.0..1.0) * scale)
}

pub fn random_matrix<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || uniform(rng, scale))
}

pub fn random_vector<T: Scalar, R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(n, || uniform(rng, scale))
}

pub fn random_weights<T: Scalar, R: Rng>(
    rng: &mut R,
    c: usize,
    heads: usize,
    d: usize,
    grid: (usize, usize),
) -> AttnPoolWeights<T> {
    let s = 1.0 / (c as f64).sqrt();
    let k1 = grid.0 * grid.1 + 1;
    AttnPoolWeights::new(
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, d, s),
        random_vector(rng, d, 0.1),
        random_matrix(rng, k1, c, 0.2),
        heads,
        grid,
    )
    .expect("consistent fixture")
}

/// Non-negative activations in `[0, 2)`.
pub fn random_activation<T: Scalar, R: Rng>(rng: &mut R, c: usize, grid: (usize, usize)) -> Array3<T> {
    Array3::from_shape_simple_fn((c, grid.0, grid.1), || T::lit(rng.gen_range(0.0..2.0)))
}
