//! Seeded random instances shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;
pub mod suites;

use ccl::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// A small loss instance: `2n` feature rows of width `d`, `r` centers, an
/// assignment per row and a positive concentration per center.
#[derive(Clone, Debug)]
pub struct Instance {
    pub features: Rows,
    pub centers: Rows,
    pub assignments: Vec<usize>,
    pub phis: Vec<f64>,
    pub tau: f64,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = rng(seed);
    let n = 2 * rng.random_range(1..=4);
    let d = rng.random_range(2..=16);
    let r = rng.random_range(2..=4);
    Instance {
        features: random_rows(&mut rng, n, d),
        centers: random_rows(&mut rng, r, d),
        assignments: (0..n).map(|_| rng.random_range(0..r)).collect(),
        phis: (0..r).map(|_| rng.random_range(0.05..1.0)).collect(),
        tau: rng.random_range(0.1..1.0),
    }
}
