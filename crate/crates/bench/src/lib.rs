//! Input builders shared by the benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random representations and open gates for `m` sources of `n` nodes.
pub fn alignment_inputs(m: usize, n: usize, dim: usize, seed: u64) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps = (0..m)
        .map(|_| (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let gates = (0..m)
        .map(|_| (0..n).map(|_| (0..m - 1).map(|_| rng.random_range(0.05..0.95)).collect()).collect())
        .collect();
    (reps, gates)
}

/// `n` random loss vectors with `m` objectives.
pub fn loss_points(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}
