#![allow(dead_code)]

use disc_core::rng;
use disc_core::synthdata::{self, DataConfig, GammaPatterns, LabeledDataset};
use disc_core::Matrix;
use rand::Rng;

/// Patterns, training and test data for a small planted instance.
pub fn planted(p1: usize, p2: usize, n: usize, k: usize, seed: u64) -> (DataConfig, GammaPatterns, LabeledDataset, LabeledDataset) {
    let cfg = DataConfig::new(p1, p2, n, k, seed);
    let (patterns, train, test) = synthdata::generate_all(&cfg, 4000).unwrap();
    (cfg, patterns, train, test)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng::normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_labels<R: Rng>(n: usize, rng: &mut R) -> Vec<i32> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
