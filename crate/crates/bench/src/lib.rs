//! Input fixtures shared by the benchmarks.

use rand::Rng;
use renalseq_core::{rng, ModelParams, ScoredSet};

/// Model with uniform(-0.5, 0.5) weights and a random multi-hot sequence.
pub fn model_and_sequence(
    hidden: usize,
    width: usize,
    steps: usize,
    seed: u64,
) -> (ModelParams, Vec<f64>, [f64; 2]) {
    let mut r = rng::seeded(seed);
    let mut p = ModelParams::zeros(hidden, width, 2);
    for t in p.tensors_mut() {
        for v in t {
            *v = r.random_range(-0.5..0.5);
        }
    }
    let x = (0..steps * width)
        .map(|_| f64::from(u8::from(r.random_bool(0.1))))
        .collect();
    (p, x, [r.random_range(0.0..1.0), 1.0])
}

/// `n` scores on a coarse grid, so ties occur, with alternating labels.
pub fn scored_set(n: usize, seed: u64) -> ScoredSet {
    let mut r = rng::seeded(seed);
    let scores = (0..n)
        .map(|_| f64::from(r.random_range(0..100u8)) / 100.0)
        .collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    ScoredSet::from_scores(scores, labels).expect("both classes present")
}

/// `n` points in `dim` dimensions, uniform on the unit cube.
pub fn points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(0.0..1.0)).collect())
        .collect()
}
