//! Seeded inputs shared by the benchmarks.

use querywise::data::{ImageBatch, ImageShape};
use querywise::{Architecture, Matrix, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INPUT: ImageShape = ImageShape::new(1, 16, 16);

pub fn conv_net(seed: u64) -> Network {
    Network::new(Architecture::conv_small(INPUT, 3), seed).expect("valid architecture")
}

pub fn images(n: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * INPUT.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ImageBatch::new(INPUT, data).expect("finite pixels")
}

pub fn matrix(rows: usize, cols: usize, spread: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-spread..spread)).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

pub fn labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}
