//! Concept-aware mixup: rows of the other classes are blended with images of
//! the concepts a class dominates, so those concepts stop telling classes apart.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::conceptbank::ConceptBank;
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::synthdata::TrainView;

/// Shape parameters of the Beta law for the mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { beta1: 2.0, beta2: 2.0 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) || !self.beta1.is_finite() || !self.beta2.is_finite() {
            bail!(Config, "mixup shape parameters must be positive (got {}, {})", self.beta1, self.beta2);
        }
        Ok(())
    }

    pub fn sample_lambdas<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let beta = Beta::new(self.beta1, self.beta2).map_err(|e| crate::Error::Config(alloc::format!("{e}")))?;
        Ok((0..count).map(|_| beta.sample(rng)).collect())
    }
}

/// Draws a bank position from the categorical law `p` by inversion.
pub fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u = rng::uniform(rng);
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding left a sliver of mass past the end.
    last
}

/// `count` concept images with concepts drawn i.i.d. from `p` (bank order).
pub fn sample_concepts<R: Rng + ?Sized>(bank: &ConceptBank, p: &[f64], count: usize, rng: &mut R) -> Result<Matrix> {
    if p.len() != bank.len() {
        bail!(Dimension, "{} probabilities for a bank of {}", p.len(), bank.len());
    }
    if p.iter().any(|v| !(*v >= 0.0)) {
        bail!(Config, "concept probabilities must be non-negative");
    }
    if !(p.iter().sum::<f64>() > 0.0) {
        bail!(Empty, "no spurious concepts for class");
    }
    let mut out = Matrix::zeros(count, bank.input_dim);
    for r in 0..count {
        let i = sample_index(p, rng);
        out.row_mut(r).copy_from_slice(&bank.image_at(i, rng));
    }
    Ok(out)
}

/// Row-wise `lambda x + (1 - lambda) c` with the given weights.
pub fn mixup_with(x: &Matrix, concepts: &Matrix, lambdas: &[f64]) -> Result<Matrix> {
    if x.shape() != concepts.shape() || lambdas.len() != x.rows() {
        bail!(
            Dimension,
            "mixing {:?} rows with {:?} concept images and {} weights",
            x.shape(),
            concepts.shape(),
            lambdas.len()
        );
    }
    let mut out = x.clone();
    for (r, &l) in lambdas.iter().enumerate() {
        for (o, c) in out.row_mut(r).iter_mut().zip(concepts.row(r)) {
            *o = l * *o + (1.0 - l) * c;
        }
    }
    Ok(out)
}

/// Mixup with one Beta-distributed weight per row. Returns the mixed rows and the weights.
pub fn mixup<R: Rng + ?Sized>(x: &Matrix, concepts: &Matrix, cfg: &MixupConfig, rng: &mut R) -> Result<(Matrix, Vec<f64>)> {
    let lambdas = cfg.sample_lambdas(x.rows(), rng)?;
    Ok((mixup_with(x, concepts, &lambdas)?, lambdas))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervenedBatch {
    /// Source rows in the training set.
    pub rows: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<i32>,
    pub lambdas: Vec<f64>,
}

/// Rows outside class `label`, drawn uniformly with replacement, mixed with
/// images of the concepts `p` assigns to `label`.
///
/// `Ok(None)` means the class has no sensitivity mass and is skipped.
pub fn build_intervened_batch<R: Rng + ?Sized>(
    view: &TrainView<'_>,
    label: i32,
    bank: &ConceptBank,
    p: Option<&[f64]>,
    batch_size: usize,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<Option<IntervenedBatch>> {
    let complement: Vec<usize> = (0..view.len()).filter(|&i| view.labels[i] != label).collect();
    if complement.is_empty() {
        bail!(Empty, "no rows outside class {}", label);
    }
    let Some(p) = p else { return Ok(None) };
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let rows: Vec<usize> = (0..batch_size).map(|_| complement[rng::below(rng, complement.len())]).collect();
    let x = view.features.select_rows(&rows);
    let concepts = sample_concepts(bank, p, batch_size, rng)?;
    let (features, lambdas) = mixup(&x, &concepts, cfg, rng)?;
    let labels = rows.iter().map(|&i| view.labels[i]).collect();
    Ok(Some(IntervenedBatch { rows, features, labels, lambdas }))
}
