//! Concept sensitivity: how unevenly each concept is favoured by the model's
//! update direction across environments.
//!
//! For environment `j` the environment gradient matrix `M_j` has one row per
//! class. A concept's tendency score in that environment is `M_j v` for its
//! probe `v`; its dominant class maximises the tendency summed over
//! environments, and its sensitivity is the population variance of the
//! dominant-class tendency across environments.
//!
//! With a per-class head, `M_j` is the descent direction of the mean batch loss
//! with respect to the head. A single ±1 output has no per-class rows, so row
//! `y` is built from the class-`y` rows of the batch as `y * X_y^T (y - X_y w) / B_y`
//! (for squared loss; other losses use their own residual). The leading `y`
//! points each row toward "more class `y`".

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conceptbank::CavSet;
use crate::envcluster::EnvironmentPartition;
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::Classifier;
use crate::rng;
use crate::synthdata::{TrainView, CLASSES};

/// Which way environment gradient matrices point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgmSign {
    /// Negative loss gradient.
    #[default]
    Descent,
    /// The loss gradient itself.
    Gradient,
}

fn sample_batch<R: Rng + ?Sized>(env: &[usize], egm_batch: usize, rng: &mut R) -> Vec<usize> {
    if egm_batch >= env.len() {
        return env.to_vec();
    }
    let perm = rng::permutation(rng, env.len());
    perm[..egm_batch].iter().map(|&i| env[i]).collect()
}

/// Un-oriented per-class rows for a single-output head:
/// `-(d/dw) mean loss` over the batch rows of each class, i.e.
/// `X_y^T (y - X_y w) / B_y` under squared loss. Classes absent from the batch give zero rows.
pub fn class_descent_rows(classifier: &Classifier, x: &Matrix, labels: &[i32]) -> Result<Matrix> {
    let d = classifier.embedding_dim();
    let mut out = Matrix::zeros(CLASSES.len(), d);
    for (ci, &y) in CLASSES.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if rows.is_empty() {
            continue;
        }
        let sub_labels = vec![y; rows.len()];
        let g = classifier.last_layer_gradient(&x.select_rows(&rows), &sub_labels, None)?;
        for (o, v) in out.row_mut(ci).iter_mut().zip(g.row(0)) {
            *o = -v;
        }
    }
    Ok(out)
}

/// Environment gradient matrix on the given rows, `|Y| x d`.
pub fn egm_on_rows(classifier: &Classifier, x: &Matrix, labels: &[i32], sign: EgmSign) -> Result<Matrix> {
    if labels.is_empty() {
        bail!(Empty, "environment has no rows");
    }
    let mut m = if classifier.is_single_output() {
        let mut m = class_descent_rows(classifier, x, labels)?;
        for (ci, &y) in CLASSES.iter().enumerate() {
            m.row_mut(ci).iter_mut().for_each(|v| *v *= f64::from(y));
        }
        m
    } else {
        let mut g = classifier.last_layer_gradient(x, labels, None)?;
        g.scale(-1.0);
        g
    };
    if sign == EgmSign::Gradient {
        m.scale(-1.0);
    }
    Ok(m)
}

/// Environment gradient matrix of environment `env`, on a batch of at most
/// `egm_batch` rows drawn without replacement.
pub fn environment_gradient<R: Rng + ?Sized>(
    classifier: &Classifier,
    view: &TrainView<'_>,
    env: &[usize],
    egm_batch: usize,
    sign: EgmSign,
    rng: &mut R,
) -> Result<Matrix> {
    if env.is_empty() {
        bail!(Empty, "empty environment");
    }
    if egm_batch == 0 {
        bail!(Config, "egm_batch must be positive");
    }
    let batch = sample_batch(env, egm_batch, rng);
    let labels: Vec<i32> = batch.iter().map(|&i| view.labels[i]).collect();
    egm_on_rows(classifier, &view.features.select_rows(&batch), &labels, sign)
}

/// `M v`: one tendency score per class.
pub fn concept_tendency(v: &[f64], egm: &Matrix) -> Result<Vec<f64>> {
    egm.matvec(v)
}

/// Class index maximising the tendency summed over environments; ties go to
/// the lower index.
pub fn dominant_class(v: &[f64], egms: &[Matrix]) -> Result<usize> {
    let classes = egms.first().map_or(0, Matrix::rows);
    if classes == 0 {
        bail!(Empty, "no environment gradient matrices");
    }
    let mut total = vec![0.0; classes];
    for m in egms {
        for (t, s) in total.iter_mut().zip(concept_tendency(v, m)?) {
            *t += s;
        }
    }
    let mut best = 0;
    for (c, t) in total.iter().enumerate() {
        if *t > total[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Population variance, across environments, of the tendency at `class`.
pub fn concept_sensitivity(v: &[f64], egms: &[Matrix], class: usize) -> Result<f64> {
    let mut scores = Vec::with_capacity(egms.len());
    for m in egms {
        if class >= m.rows() {
            bail!(Dimension, "class index {} for a {}-row matrix", class, m.rows());
        }
        scores.push(math::dot(m.row(class), v));
    }
    Ok(math::population_variance(&scores))
}

/// Per class: sensitivities masked to the concepts it dominates, normalised.
/// `None` marks a class with no sensitivity mass.
pub fn concept_probabilities(sensitivity: &[f64], dominant: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    (0..classes)
        .map(|c| {
            let masked: Vec<f64> =
                sensitivity.iter().zip(dominant).map(|(s, d)| if *d == c { *s } else { 0.0 }).collect();
            let total: f64 = masked.iter().sum();
            if total > 0.0 && total.is_finite() {
                Some(masked.iter().map(|s| s / total).collect())
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub epoch: usize,
    pub concept_ids: Vec<usize>,
    /// `k x m` tendency scores at each concept's dominant class.
    pub cts: Matrix,
    pub sensitivity: Vec<f64>,
    /// Dominant class index per concept (into [`CLASSES`]).
    pub dominant: Vec<usize>,
    /// Per class index; `None` when the class has no sensitivity mass.
    pub probabilities: Vec<Option<Vec<f64>>>,
}

impl SensitivityReport {
    pub fn dominant_labels(&self) -> Vec<i32> {
        self.dominant.iter().map(|&c| CLASSES[c]).collect()
    }

    /// Mean sensitivity over the concepts at the given bank positions.
    pub fn mean_sensitivity(&self, positions: &[usize]) -> f64 {
        let vals: Vec<f64> = positions.iter().map(|&i| self.sensitivity[i]).collect();
        math::mean(&vals)
    }
}

/// Sensitivity report from already computed environment gradient matrices.
pub fn report_from_egms(egms: &[Matrix], cavs: &CavSet, epoch: usize) -> Result<SensitivityReport> {
    let k = egms.len();
    let m = cavs.len();
    let classes = egms.first().map_or(0, Matrix::rows);
    let mut cts = Matrix::zeros(k, m);
    let mut sensitivity = Vec::with_capacity(m);
    let mut dominant = Vec::with_capacity(m);
    for i in 0..m {
        let v = cavs.vector(i);
        let c = dominant_class(v, egms)?;
        for (j, egm) in egms.iter().enumerate() {
            cts[(j, i)] = concept_tendency(v, egm)?[c];
        }
        sensitivity.push(concept_sensitivity(v, egms, c)?);
        dominant.push(c);
    }
    let probabilities = concept_probabilities(&sensitivity, &dominant, classes);
    Ok(SensitivityReport { epoch, concept_ids: cavs.concept_ids.clone(), cts, sensitivity, dominant, probabilities })
}

/// Computes every environment's gradient matrix, each on its own stream.
pub fn environment_gradients<R: Rng + ?Sized>(
    classifier: &Classifier,
    view: &TrainView<'_>,
    partition: &EnvironmentPartition,
    egm_batch: usize,
    sign: EgmSign,
    rng: &mut R,
) -> Result<Vec<Matrix>> {
    let seed = rng::child_seed(rng);
    partition
        .environments
        .iter()
        .enumerate()
        .map(|(j, env)| {
            let mut r = rng::indexed_stream(seed, "egm", j as u64);
            environment_gradient(classifier, view, env, egm_batch, sign, &mut r)
        })
        .collect()
}

/// Full sensitivity pass for one epoch.
pub fn discover<R: Rng + ?Sized>(
    classifier: &Classifier,
    view: &TrainView<'_>,
    partition: &EnvironmentPartition,
    cavs: &CavSet,
    egm_batch: usize,
    sign: EgmSign,
    epoch: usize,
    rng: &mut R,
) -> Result<SensitivityReport> {
    if cavs.dim() != classifier.embedding_dim() {
        bail!(Dimension, "probes have dimension {}, embeddings {}", cavs.dim(), classifier.embedding_dim());
    }
    let egms = environment_gradients(classifier, view, partition, egm_batch, sign, rng)?;
    report_from_egms(&egms, cavs, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_of_one_two_three() {
        let egms: Vec<Matrix> = [1.0, 2.0, 3.0].iter().map(|&s| Matrix::row_vector(&[s, 0.0])).collect();
        let s = concept_sensitivity(&[1.0, 0.0], &egms, 0).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(concept_sensitivity(&[1.0, 0.0], &egms[..1], 0).unwrap(), 0.0);
    }

    #[test]
    fn probabilities_mask_and_normalise() {
        let p = concept_probabilities(&[3.0, 1.0], &[0, 0], 2);
        assert_eq!(p[0], Some(vec![0.75, 0.25]));
        assert_eq!(p[1], None);
        assert!(concept_probabilities(&[0.0, 0.0], &[0, 1], 2).iter().all(Option::is_none));
    }

    #[test]
    fn tendency_by_hand() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0, -1.0],
            vec![0.5, 0.0, 3.0, 2.0],
            vec![-1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let t = concept_tendency(&[2.0, -1.0, 0.5, 1.0], &m).unwrap();
        assert_eq!(t, vec![2.0 - 2.0 - 1.0, 1.0 + 1.5 + 2.0, -2.0 - 1.0 + 0.5 + 1.0]);
        assert!(concept_tendency(&[1.0], &m).is_err());
    }

    #[test]
    fn dominant_class_ties_go_low() {
        let m = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(dominant_class(&[1.0], &[m.clone(), m]).unwrap(), 0);
    }
}
