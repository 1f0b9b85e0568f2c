//! Gaussian-mixture data with planted, environment-dependent spurious features.
//!
//! Each row is `[x_inv | x_spu]` with `x_inv = y*mu + noise` (noise covariance
//! `sigma1`) and `x_spu = gamma[y][env] + s*noise`. Test rows drop `gamma`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng;

/// Environment id stamped on test rows, which belong to no training environment.
pub const TEST_ENV: u32 = 0;

/// The two class labels, in class-index order.
pub const CLASSES: [i32; 2] = [-1, 1];

/// Index of a ±1 label in [`CLASSES`].
#[inline]
pub fn class_index(label: i32) -> usize {
    usize::from(label > 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    Dense(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub p1: usize,
    pub p2: usize,
    pub n: usize,
    pub k: usize,
    pub mu: Vec<f64>,
    pub sigma1: Covariance,
    pub spu_noise_scale: f64,
    pub class_balance: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub seed: u64,
}

impl DataConfig {
    /// Defaults with `mu` entries `1/sqrt(p1)` (so `|mu| = 1`) and identity `sigma1`.
    pub fn new(p1: usize, p2: usize, n: usize, k: usize, seed: u64) -> Self {
        let m = if p1 == 0 { 0.0 } else { 1.0 / math::sqrt(p1 as f64) };
        Self {
            p1,
            p2,
            n,
            k,
            mu: vec![m; p1],
            sigma1: Covariance::Identity,
            spu_noise_scale: 1.0,
            class_balance: 0.5,
            k0: 0.2,
            k1: 0.5,
            k2: 2.0,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 < 1 {
            bail!(Config, "p1 must be at least 1");
        }
        if self.n < 1 {
            bail!(Config, "n must be at least 1");
        }
        if self.k < 1 {
            bail!(Config, "k must be at least 1");
        }
        if self.mu.len() != self.p1 {
            bail!(Config, "mu has {} entries but p1 = {}", self.mu.len(), self.p1);
        }
        if !math::all_finite(&self.mu) {
            bail!(Config, "mu has non-finite entries");
        }
        if !(self.spu_noise_scale >= 0.0) || !self.spu_noise_scale.is_finite() {
            bail!(Config, "spu_noise_scale must be finite and non-negative");
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            bail!(Config, "class_balance must lie strictly between 0 and 1");
        }
        if !(self.k1 > 0.0) || !(self.k2 >= self.k1) {
            bail!(Config, "eigenvalue bounds need 0 < k1 <= k2 (got {}, {})", self.k1, self.k2);
        }
        if !(self.k0 >= 0.0) {
            bail!(Config, "k0 must be non-negative");
        }
        let eig = match &self.sigma1 {
            Covariance::Identity => vec![1.0],
            Covariance::Dense(rows) => {
                let s = Matrix::from_rows(rows)?;
                if s.shape() != (self.p1, self.p1) {
                    bail!(Config, "sigma1 is {}x{}, expected {}x{}", s.rows(), s.cols(), self.p1, self.p1);
                }
                if !s.is_symmetric(1e-12) {
                    bail!(Config, "sigma1 is not symmetric");
                }
                s.symmetric_eigenvalues()?
            }
        };
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        if lo < self.k1 || hi > self.k2 {
            bail!(Config, "sigma1 eigenvalues [{}, {}] fall outside [{}, {}]", lo, hi, self.k1, self.k2);
        }
        Ok(())
    }

    /// `sigma1` as a matrix.
    pub fn sigma1_matrix(&self) -> Result<Matrix> {
        match &self.sigma1 {
            Covariance::Identity => Ok(Matrix::identity(self.p1)),
            Covariance::Dense(rows) => Matrix::from_rows(rows),
        }
    }

    /// Lower Cholesky factor of `sigma1`, `None` for the identity.
    fn sigma1_factor(&self) -> Result<Option<Matrix>> {
        match &self.sigma1 {
            Covariance::Identity => Ok(None),
            Covariance::Dense(rows) => Ok(Some(Matrix::from_rows(rows)?.cholesky()?)),
        }
    }
}

/// Binary spurious patterns, `gamma[class_index][env - 1][coord]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPatterns {
    pub p2: usize,
    pub k: usize,
    pub gamma: [Vec<Vec<u8>>; 2],
}

impl GammaPatterns {
    pub fn empty(k: usize) -> Self {
        Self { p2: 0, k, gamma: [vec![Vec::new(); k], vec![Vec::new(); k]] }
    }

    /// Pattern for a label and a 1-based environment id.
    pub fn pattern(&self, label: i32, env: u32) -> &[u8] {
        &self.gamma[class_index(label)][env as usize - 1]
    }

    /// Coordinates (within the spurious block) that are ever active for a class.
    pub fn support(&self, label: i32) -> Vec<usize> {
        let per_env = &self.gamma[class_index(label)];
        (0..self.p2).filter(|&j| per_env.iter().any(|g| g[j] == 1)).collect()
    }

    /// Coordinates owned by a class: the first half for +1, the second for -1.
    pub fn owned(&self, label: i32) -> core::ops::Range<usize> {
        let half = self.p2 / 2;
        if label > 0 {
            0..half
        } else {
            half..self.p2
        }
    }

    /// Population variance of `gamma[label][.][coord]` across environments.
    pub fn coordinate_variance(&self, label: i32, coord: usize) -> f64 {
        let vals: Vec<f64> = self.gamma[class_index(label)].iter().map(|g| f64::from(g[coord])).collect();
        math::population_variance(&vals)
    }

    /// Disjoint class supports and above-threshold variance on every supported coordinate.
    pub fn check_invariants(&self, k0: f64) -> Result<()> {
        let plus = self.support(1);
        let minus = self.support(-1);
        if let Some(j) = plus.iter().find(|j| minus.contains(j)) {
            bail!(Config, "spurious coordinate {} is active for both classes", j);
        }
        for (label, support) in [(1, &plus), (-1, &minus)] {
            for &j in support {
                let v = self.coordinate_variance(label, j);
                if !(v > k0) {
                    bail!(Config, "coordinate {} of class {} varies by {} <= {}", j, label, v, k0);
                }
            }
        }
        Ok(())
    }
}

const GAMMA_RETRIES: usize = 10_000;

/// Samples patterns in which each class owns half of the spurious coordinates.
///
/// Each owned coordinate gets i.i.d. Bernoulli(0.5) entries across environments,
/// redrawn until their population variance exceeds `k0`.
pub fn make_gamma_patterns<R: Rng + ?Sized>(p2: usize, k: usize, k0: f64, rng: &mut R) -> Result<GammaPatterns> {
    if k < 1 {
        bail!(Config, "k must be at least 1");
    }
    if p2 == 0 {
        return Ok(GammaPatterns::empty(k));
    }
    if p2 % 2 != 0 {
        bail!(Config, "p2 = {} must be even to split between the two classes", p2);
    }
    if k == 1 {
        bail!(Config, "a single environment gives zero variance, which cannot exceed k0");
    }
    // Best achievable variance of a 0/1 vector of length k.
    let best = (0..=k)
        .map(|ones| {
            let f = ones as f64 / k as f64;
            f * (1.0 - f)
        })
        .fold(0.0, f64::max);
    if !(best > k0) {
        bail!(Config, "no 0/1 pattern over {} environments has variance above {}", k, k0);
    }
    let mut patterns = GammaPatterns { p2, k, gamma: [vec![vec![0u8; p2]; k], vec![vec![0u8; p2]; k]] };
    for label in [1, -1] {
        let ci = class_index(label);
        for coord in patterns.owned(label) {
            let mut column = vec![0u8; k];
            let mut ok = false;
            for _ in 0..GAMMA_RETRIES {
                for c in column.iter_mut() {
                    *c = u8::from(rng.random_bool(0.5));
                }
                let vals: Vec<f64> = column.iter().map(|&c| f64::from(c)).collect();
                if math::population_variance(&vals) > k0 {
                    ok = true;
                    break;
                }
            }
            if !ok {
                bail!(Sampling, "no valid pattern for coordinate {} after {} draws", coord, GAMMA_RETRIES);
            }
            for (env, &c) in column.iter().enumerate() {
                patterns.gamma[ci][env][coord] = c;
            }
        }
    }
    Ok(patterns)
}

/// Features with labels and the environment each row was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<i32>,
    pub env_ids: Vec<u32>,
}

/// What a group-unaware training method is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [i32],
}

/// Rows with their (class, environment) groups, for evaluation and group-aware baselines.
#[derive(Debug, Clone, Copy)]
pub struct GroupedView<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [i32],
    pub env_ids: &'a [u32],
}

impl<'a> GroupedView<'a> {
    pub fn without_groups(&self) -> TrainView<'a> {
        TrainView { features: self.features, labels: self.labels }
    }
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices carrying `label`.
    pub fn indices_of(&self, label: i32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<i32>, env_ids: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != env_ids.len() {
            bail!(
                Dimension,
                "{} feature rows, {} labels, {} environment ids",
                features.rows(),
                labels.len(),
                env_ids.len()
            );
        }
        if let Some(l) = labels.iter().find(|&&l| l != 1 && l != -1) {
            bail!(Config, "label {} is not -1 or +1", l);
        }
        Ok(Self { features, labels, env_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view(&self) -> TrainView<'_> {
        TrainView { features: &self.features, labels: &self.labels }
    }

    pub fn grouped(&self) -> GroupedView<'_> {
        GroupedView { features: &self.features, labels: &self.labels, env_ids: &self.env_ids }
    }

    /// `(label, env)` per row.
    pub fn group_ids(&self) -> Vec<(i32, u32)> {
        self.labels.iter().copied().zip(self.env_ids.iter().copied()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            env_ids: indices.iter().map(|&i| self.env_ids[i]).collect(),
        }
    }
}

fn check_patterns(config: &DataConfig, patterns: &GammaPatterns) -> Result<()> {
    if patterns.p2 != config.p2 || (config.p2 > 0 && patterns.k != config.k) {
        bail!(
            Config,
            "patterns are for p2={}, k={} but the config has p2={}, k={}",
            patterns.p2,
            patterns.k,
            config.p2,
            config.k
        );
    }
    Ok(())
}

fn draw_rows<R: Rng + ?Sized>(
    config: &DataConfig,
    patterns: &GammaPatterns,
    n: usize,
    test: bool,
    rng: &mut R,
) -> Result<LabeledDataset> {
    config.validate()?;
    check_patterns(config, patterns)?;
    let factor = config.sigma1_factor()?;
    let (p1, p2) = (config.p1, config.p2);
    let mut features = Matrix::zeros(n, p1 + p2);
    let mut labels = Vec::with_capacity(n);
    let mut env_ids = Vec::with_capacity(n);
    let mut z = vec![0.0; p1];
    for r in 0..n {
        let y: i32 = if rng.random_bool(config.class_balance) { 1 } else { -1 };
        let env = if test { TEST_ENV } else { 1 + rng::below(rng, config.k) as u32 };
        for v in z.iter_mut() {
            *v = rng::normal(rng);
        }
        let row = features.row_mut(r);
        for j in 0..p1 {
            let noise = match &factor {
                None => z[j],
                Some(l) => (0..=j).map(|c| l[(j, c)] * z[c]).sum(),
            };
            row[j] = f64::from(y) * config.mu[j] + noise;
        }
        for j in 0..p2 {
            let shift = if test { 0.0 } else { f64::from(patterns.pattern(y, env)[j]) };
            row[p1 + j] = shift + config.spu_noise_scale * rng::normal(rng);
        }
        labels.push(y);
        env_ids.push(env);
    }
    LabeledDataset::new(features, labels, env_ids)
}

/// `config.n` training rows; environments are uniform over `1..=k`.
pub fn generate_train<R: Rng + ?Sized>(config: &DataConfig, patterns: &GammaPatterns, rng: &mut R) -> Result<LabeledDataset> {
    draw_rows(config, patterns, config.n, false, rng)
}

/// Rows from the same law with the spurious shifts switched off, tagged [`TEST_ENV`].
pub fn generate_test<R: Rng + ?Sized>(
    config: &DataConfig,
    patterns: &GammaPatterns,
    n_test: usize,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if n_test == 0 {
        bail!(Config, "n_test must be positive");
    }
    draw_rows(config, patterns, n_test, true, rng)
}

/// Names the spurious input coordinates of a dataset, for reporting.
pub fn spurious_coordinates(config: &DataConfig) -> core::ops::Range<usize> {
    config.p1..config.p1 + config.p2
}

/// Convenience wrapper producing patterns, train and test sets from the config seed.
pub fn generate_all(config: &DataConfig, n_test: usize) -> Result<(GammaPatterns, LabeledDataset, LabeledDataset)> {
    let mut prng = rng::stream(config.seed, "patterns");
    let patterns = make_gamma_patterns(config.p2, config.k, config.k0, &mut prng)
        .map_err(|e| crate::Error::Config(format!("{e}")))?;
    let train = generate_train(config, &patterns, &mut rng::stream(config.seed, "train-data"))?;
    let test = generate_test(config, &patterns, n_test, &mut rng::stream(config.seed, "test-data"))?;
    Ok((patterns, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spurious_dims_give_empty_patterns() {
        let p = make_gamma_patterns(0, 3, 0.2, &mut rng::stream(0, "t")).unwrap();
        assert_eq!(p.p2, 0);
        p.check_invariants(0.2).unwrap();
    }

    #[test]
    fn single_environment_rejected() {
        assert!(make_gamma_patterns(2, 1, 0.2, &mut rng::stream(0, "t")).is_err());
        assert!(make_gamma_patterns(3, 2, 0.2, &mut rng::stream(0, "t")).is_err());
        // Two environments cap the variance at 0.25.
        assert!(make_gamma_patterns(2, 2, 0.25, &mut rng::stream(0, "t")).is_err());
    }

    #[test]
    fn two_environment_patterns_are_complementary() {
        // Enumerating {0,1}^2: only (1,0) and (0,1) have variance 0.25 > 0.2.
        let p = make_gamma_patterns(2, 2, 0.2, &mut rng::stream(3, "t")).unwrap();
        p.check_invariants(0.2).unwrap();
        assert_eq!(p.owned(1), 0..1);
        assert_eq!(p.owned(-1), 1..2);
        for label in [1, -1] {
            let j = p.owned(label).start;
            let col: Vec<u8> = (1..=2).map(|e| p.pattern(label, e)[j]).collect();
            assert!(col == [1, 0] || col == [0, 1]);
            assert!((p.coordinate_variance(label, j) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_rows_equal_signal() {
        let mut c = DataConfig::new(3, 0, 50, 2, 1);
        c.sigma1 = Covariance::Dense(vec![vec![1e-30, 0.0, 0.0], vec![0.0, 1e-30, 0.0], vec![0.0, 0.0, 1e-30]]);
        c.k1 = 1e-31;
        let d = generate_train(&c, &GammaPatterns::empty(2), &mut rng::stream(1, "d")).unwrap();
        for (row, &y) in d.features.row_iter().zip(&d.labels) {
            for (x, m) in row.iter().zip(&c.mu) {
                assert!((x - f64::from(y) * m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma1_outside_bounds_rejected() {
        let mut c = DataConfig::new(2, 0, 10, 2, 1);
        c.sigma1 = Covariance::Dense(vec![vec![3.0, 0.0], vec![0.0, 1.0]]);
        assert!(c.validate().is_err());
        c.sigma1 = Covariance::Dense(vec![vec![1.0, 0.3], vec![0.2, 1.0]]);
        assert!(c.validate().is_err());
    }
}
