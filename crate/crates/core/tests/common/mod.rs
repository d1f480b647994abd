#![allow(dead_code)]

use dcdl::distributions::{DiscreteDistribution, EmbeddingBatch};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * spread)
}

pub fn uniform_dist(points: Array2<f64>) -> DiscreteDistribution {
    DiscreteDistribution::uniform(points).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w = Array1::from_shape_simple_fn(n, || rng.random_range(0.1..1.0));
    let s = w.sum();
    w / s
}

/// Round-robin labels, so every class gets at least `n / classes` rows.
pub fn labels_for(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Unit vectors scattered around one random direction per class.
pub fn clustered_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize, spread: f64) -> EmbeddingBatch {
    let labels = labels_for(n, classes);
    let centers = gaussian(rng, classes, dim, 1.0);
    let mut z = gaussian(rng, n, dim, spread);
    for (mut row, &y) in z.rows_mut().into_iter().zip(&labels) {
        row += &centers.row(y);
    }
    EmbeddingBatch::normalized(z, labels, classes).unwrap()
}
