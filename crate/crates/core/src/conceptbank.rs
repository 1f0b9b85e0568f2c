//! Synthetic concepts and the linear probes (CAVs) that locate them in the
//! classifier's embedding space.
//!
//! In synthetic mode concept `i` is the input basis vector of its coordinate,
//! optionally jittered by isotropic noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::Encoder;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub category: String,
    /// Input coordinate whose basis vector is this concept's image.
    pub coordinate: usize,
}

/// Linear-probe fitting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavParams {
    pub n_pos: usize,
    pub n_neg: usize,
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for CavParams {
    fn default() -> Self {
        Self { n_pos: 150, n_neg: 150, lambda: 1e-2, epochs: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub concepts: Vec<Concept>,
    pub input_dim: usize,
    /// Std of the isotropic noise added to each concept image.
    pub image_noise: f64,
    pub cav: CavParams,
}

impl ConceptBank {
    pub fn new(mut concepts: Vec<Concept>, input_dim: usize, image_noise: f64, cav: CavParams) -> Result<Self> {
        concepts.sort_by_key(|c| c.id);
        if concepts.windows(2).any(|w| w[0].id == w[1].id) {
            bail!(Config, "concept ids must be unique");
        }
        if concepts.len() < 2 {
            bail!(Config, "a concept bank needs at least two concepts, got {}", concepts.len());
        }
        if let Some(c) = concepts.iter().find(|c| c.coordinate >= input_dim) {
            bail!(Config, "concept {} maps to coordinate {} of a {}-dim input", c.id, c.coordinate, input_dim);
        }
        if !(image_noise >= 0.0) || !image_noise.is_finite() {
            bail!(Config, "image noise must be finite and non-negative");
        }
        if cav.n_pos == 0 || cav.n_neg == 0 || cav.epochs == 0 || !(cav.lambda > 0.0) {
            bail!(Config, "CAV fitting needs positive sample counts, epochs and lambda");
        }
        Ok(Self { concepts, input_dim, image_noise, cav })
    }

    /// One concept per input coordinate; the first `p1` are the invariant block.
    pub fn synthetic(p1: usize, p2: usize, image_noise: f64, cav: CavParams) -> Result<Self> {
        let concepts = (0..p1 + p2)
            .map(|j| {
                let (category, local) = if j < p1 { ("invariant", j) } else { ("spurious", j - p1) };
                Concept { id: j, name: format!("{category}_{local}"), category: String::from(category), coordinate: j }
            })
            .collect();
        Self::new(concepts, p1 + p2, image_noise, cav)
    }

    /// Keeps only the listed concept ids.
    pub fn with_allowlist(&self, ids: &[usize]) -> Result<Self> {
        if let Some(id) = ids.iter().find(|id| self.index_of(**id).is_none()) {
            bail!(Config, "allowlist names unknown concept {}", id);
        }
        let concepts = self.concepts.iter().filter(|c| ids.contains(&c.id)).cloned().collect();
        Self::new(concepts, self.input_dim, self.image_noise, self.cav)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.concepts.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    /// Image of the concept at bank position `index`.
    pub fn image_at<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Vec<f64> {
        let mut x = vec![0.0; self.input_dim];
        if self.image_noise > 0.0 {
            for v in x.iter_mut() {
                *v = self.image_noise * rng::normal(rng);
            }
        }
        x[self.concepts[index].coordinate] += 1.0;
        x
    }
}

/// A fresh image of concept `concept_id`.
pub fn synth_concept_image<R: Rng + ?Sized>(bank: &ConceptBank, concept_id: usize, rng: &mut R) -> Result<Vec<f64>> {
    match bank.index_of(concept_id) {
        Some(i) => Ok(bank.image_at(i, rng)),
        None => bail!(Config, "unknown concept id {}", concept_id),
    }
}

/// Unit CAVs, one row per concept in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavSet {
    pub concept_ids: Vec<usize>,
    pub vectors: Matrix,
    /// Smallest signed distance of a training point to the fitted hyperplane.
    pub fit_margins: Vec<f64>,
}

impl CavSet {
    pub fn len(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }
}

/// Averaged Pegasos solution of `lambda/2 |w|^2 + mean hinge(1 - t (w.x + b))`,
/// with the bias carried as an extra constant feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective of the averaged iterate after each pass.
    pub objective: Vec<f64>,
}

/// Soft-margin objective at `(w, b)`, with the bias regularised like a weight.
pub fn svm_objective(points: &Matrix, targets: &[f64], lambda: f64, w: &[f64], b: f64) -> f64 {
    let hinge: f64 = points
        .row_iter()
        .zip(targets)
        .map(|(x, t)| (1.0 - t * (math::dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * lambda * (math::dot(w, w) + b * b) + hinge / targets.len() as f64
}

pub fn fit_pegasos<R: Rng + ?Sized>(points: &Matrix, targets: &[f64], lambda: f64, epochs: usize, rng: &mut R) -> SvmFit {
    let (n, d) = points.shape();
    // Last slot is the bias.
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let radius = 1.0 / math::sqrt(lambda);
    let mut objective = Vec::with_capacity(epochs);
    let mut t = 0usize;
    for _ in 0..epochs {
        for i in rng::permutation(rng, n) {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = points.row(i);
            let score = math::dot(&w[..d], x) + w[d];
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if targets[i] * score < 1.0 {
                for (v, xv) in w[..d].iter_mut().zip(x) {
                    *v += eta * targets[i] * xv;
                }
                w[d] += eta * targets[i];
            }
            let norm = math::norm(&w);
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            let a = 1.0 / t as f64;
            for (m, v) in avg.iter_mut().zip(&w) {
                *m += a * (v - *m);
            }
        }
        objective.push(svm_objective(points, targets, lambda, &avg[..d], avg[d]));
    }
    SvmFit { bias: avg[d], weights: avg[..d].to_vec(), objective }
}

fn same_point_sets(a: &Matrix, b: &Matrix) -> bool {
    let sorted = |m: &Matrix| {
        let mut rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|x, y| {
            x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(core::cmp::Ordering::Equal)
        });
        rows.dedup();
        rows
    };
    sorted(a) == sorted(b)
}

/// Fits a probe separating encoded positives from encoded negatives.
///
/// Returns the unit normal, oriented so positives score higher on average, and
/// the fit margin.
pub fn learn_cav<R: Rng + ?Sized>(
    encoder: &Encoder,
    positives: &Matrix,
    negatives: &Matrix,
    params: &CavParams,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if positives.is_empty() || negatives.is_empty() {
        bail!(Empty, "probe fitting needs both positive and negative samples");
    }
    let hp = encoder.encode(positives)?;
    let hn = encoder.encode(negatives)?;
    if same_point_sets(&hp, &hn) {
        bail!(Inseparable, "inseparable concept: positives and negatives encode to the same points");
    }
    let mut points = hp.clone();
    for r in hn.row_iter() {
        points.push_row(r)?;
    }
    let targets: Vec<f64> = (0..points.rows()).map(|i| if i < hp.rows() { 1.0 } else { -1.0 }).collect();
    // Fit on centred points scaled to unit RMS radius, so the direction does
    // not depend on where the points sit or on their overall scale.
    let (d, n) = (points.cols(), points.rows() as f64);
    let mut centre = vec![0.0; d];
    for r in points.row_iter() {
        centre.iter_mut().zip(r).for_each(|(c, x)| *c += x / n);
    }
    let spread = math::sqrt(points.row_iter().map(|r| r.iter().zip(&centre).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()).sum::<f64>() / n);
    let mut scaled = points.clone();
    for r in 0..scaled.rows() {
        scaled.row_mut(r).iter_mut().zip(&centre).for_each(|(x, c)| *x = (*x - c) / spread);
    }
    let fit = fit_pegasos(&scaled, &targets, params.lambda, params.epochs, rng);
    let norm = math::norm(&fit.weights);
    if !(norm > 0.0) || !norm.is_finite() {
        bail!(Inseparable, "inseparable concept: the probe collapsed to zero");
    }
    let mut v: Vec<f64> = fit.weights.iter().map(|w| w / norm).collect();
    // Back in the original coordinates the score is v.x + bias.
    let mut bias = fit.bias * spread / norm - math::dot(&v, &centre);
    let mean_score = |m: &Matrix, v: &[f64]| m.row_iter().map(|r| math::dot(r, v)).sum::<f64>() / m.rows() as f64;
    if mean_score(&hp, &v) <= mean_score(&hn, &v) {
        v.iter_mut().for_each(|x| *x = -*x);
        bias = -bias;
    }
    let margin = points
        .row_iter()
        .zip(&targets)
        .map(|(x, t)| t * (math::dot(&v, x) + bias))
        .fold(f64::INFINITY, f64::min);
    Ok((v, margin))
}

/// Positive and negative image sets for the concept at bank position `index`.
pub fn concept_samples<R: Rng + ?Sized>(bank: &ConceptBank, index: usize, rng: &mut R) -> Result<(Matrix, Matrix)> {
    let m = bank.len();
    let mut pos = Matrix::zeros(0, 0);
    for _ in 0..bank.cav.n_pos {
        pos.push_row(&bank.image_at(index, rng))?;
    }
    let mut neg = Matrix::zeros(0, 0);
    for _ in 0..bank.cav.n_neg {
        // Uniform over the other m - 1 concepts.
        let mut j = rng::below(rng, m - 1);
        if j >= index {
            j += 1;
        }
        neg.push_row(&bank.image_at(j, rng))?;
    }
    Ok((pos, neg))
}

/// Fits the probe for the concept at bank position `index` on its own stream.
pub fn fit_concept(bank: &ConceptBank, encoder: &Encoder, index: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    let id = bank.concepts[index].id;
    let mut r = rng::indexed_stream(seed, "cav", id as u64);
    let (pos, neg) = concept_samples(bank, index, &mut r)?;
    learn_cav(encoder, &pos, &neg, &bank.cav, &mut r).map_err(|e| annotate(e, id))
}

fn annotate(e: Error, id: usize) -> Error {
    match e {
        Error::Inseparable(m) => Error::Inseparable(format!("concept {id}: {m}")),
        Error::Empty(m) => Error::Empty(format!("concept {id}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("concept {id}: {m}")),
        other => other,
    }
}

/// Assembles per-concept fits, in bank order, into a [`CavSet`].
pub fn assemble_cavs(bank: &ConceptBank, fits: Vec<(Vec<f64>, f64)>) -> Result<CavSet> {
    let d = fits.first().map_or(0, |f| f.0.len());
    let mut vectors = Matrix::zeros(0, 0);
    let mut fit_margins = Vec::with_capacity(fits.len());
    for (v, margin) in fits {
        if v.len() != d {
            bail!(Dimension, "probe of length {} among probes of length {}", v.len(), d);
        }
        vectors.push_row(&v)?;
        fit_margins.push(margin);
    }
    Ok(CavSet { concept_ids: bank.ids(), vectors, fit_margins })
}

/// Fits a probe for every concept in the bank. Each concept draws from its own
/// stream keyed by one seed taken from `rng`, so fits can run in any order.
pub fn query_cavs<R: Rng + ?Sized>(bank: &ConceptBank, encoder: &Encoder, rng: &mut R) -> Result<CavSet> {
    let seed = rng::child_seed(rng);
    let fits = (0..bank.len()).map(|i| fit_concept(bank, encoder, i, seed)).collect::<Result<Vec<_>>>()?;
    assemble_cavs(bank, fits)
}
