//! Evaluation: group accuracies, Cramér's V, the closed-form test error of the
//! linear model, least-squares solutions and sensitivity summaries.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::discovery::SensitivityReport;
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::Classifier;
use crate::synthdata::{class_index, DataConfig, GammaPatterns, GroupedView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub label: i32,
    pub env: u32,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Sorted by `(label, env)`.
    pub groups: Vec<GroupAccuracy>,
    pub avg_acc: f64,
    pub worst_acc: f64,
}

pub fn group_metrics_from_predictions(predicted: &[i32], labels: &[i32], env_ids: &[u32]) -> Result<GroupMetrics> {
    if labels.is_empty() {
        bail!(Empty, "no rows to evaluate");
    }
    if predicted.len() != labels.len() || env_ids.len() != labels.len() {
        bail!(Dimension, "{} predictions, {} labels, {} environment ids", predicted.len(), labels.len(), env_ids.len());
    }
    let mut tally: BTreeMap<(i32, u32), (usize, usize)> = BTreeMap::new();
    for ((p, y), e) in predicted.iter().zip(labels).zip(env_ids) {
        let t = tally.entry((*y, *e)).or_default();
        t.0 += 1;
        t.1 += usize::from(p == y);
    }
    let groups: Vec<GroupAccuracy> = tally
        .into_iter()
        .map(|((label, env), (n, correct))| GroupAccuracy { label, env, n, correct, accuracy: correct as f64 / n as f64 })
        .collect();
    let correct: usize = groups.iter().map(|g| g.correct).sum();
    let worst_acc = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(GroupMetrics { groups, avg_acc: correct as f64 / labels.len() as f64, worst_acc })
}

/// Accuracy per `(class, environment)` group, instance-weighted average and worst group.
pub fn group_metrics(classifier: &Classifier, data: &GroupedView<'_>) -> Result<GroupMetrics> {
    if data.labels.is_empty() {
        bail!(Empty, "no rows to evaluate");
    }
    let predicted = classifier.predict_labels(data.features)?;
    group_metrics_from_predictions(&predicted, data.labels, data.env_ids)
}

/// Cramér's V between two categorical variables, without continuity correction.
pub fn cramers_v<A: Ord + Copy, B: Ord + Copy>(attribute: &[A], label: &[B]) -> Result<f64> {
    if attribute.len() != label.len() {
        bail!(Dimension, "variables of length {} and {}", attribute.len(), label.len());
    }
    let mut rows: Vec<A> = attribute.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut cols: Vec<B> = label.to_vec();
    cols.sort_unstable();
    cols.dedup();
    if rows.len() < 2 || cols.len() < 2 {
        bail!(Config, "Cramér's V needs both variables to take at least two values");
    }
    let mut table = vec![vec![0.0; cols.len()]; rows.len()];
    for (a, b) in attribute.iter().zip(label) {
        let i = rows.binary_search(a).unwrap_or(0);
        let j = cols.binary_search(b).unwrap_or(0);
        table[i][j] += 1.0;
    }
    cramers_v_table(&table)
}

/// Cramér's V of a contingency table.
pub fn cramers_v_table(table: &[Vec<f64>]) -> Result<f64> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        bail!(Config, "contingency table must be at least 2x2 and rectangular");
    }
    let n: f64 = table.iter().flatten().sum();
    let row_tot: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_tot: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if row_tot.iter().chain(&col_tot).any(|t| *t <= 0.0) {
        bail!(Config, "contingency table has an empty row or column");
    }
    let mut chi2 = 0.0;
    for i in 0..r {
        for j in 0..c {
            let e = row_tot[i] * col_tot[j] / n;
            chi2 += (table[i][j] - e) * (table[i][j] - e) / e;
        }
    }
    let dof = (r.min(c) - 1) as f64;
    Ok(math::sqrt(chi2 / (n * dof)).min(1.0))
}

/// Which denominator the closed-form test error uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFormula {
    /// `sqrt(mu_hat' Sigma1 mu_hat + s^2 |gamma_hat|^2)`.
    #[default]
    General,
    /// `sqrt(|mu_hat|^2 + |gamma_hat|^2)`, exact only for identity `Sigma1` and unit noise.
    Printed,
}

/// Misclassification probability of `sign(mu_hat.x_inv + gamma_hat.x_spu)` on
/// test rows `x_inv = y mu + N(0, Sigma1)`, `x_spu = N(0, s^2 I)`.
pub fn theoretical_test_error(
    mu_hat: &[f64],
    gamma_hat: &[f64],
    mu: &[f64],
    sigma1: &Matrix,
    spu_noise_scale: f64,
    formula: ErrorFormula,
) -> Result<f64> {
    if mu_hat.len() != mu.len() || sigma1.shape() != (mu.len(), mu.len()) {
        bail!(Dimension, "mu_hat {}, mu {}, sigma1 {:?}", mu_hat.len(), mu.len(), sigma1.shape());
    }
    sigma1.cholesky()?;
    let g2 = math::dot(gamma_hat, gamma_hat);
    let var = match formula {
        ErrorFormula::General => {
            math::dot(mu_hat, &sigma1.matvec(mu_hat)?) + spu_noise_scale * spu_noise_scale * g2
        }
        ErrorFormula::Printed => math::dot(mu_hat, mu_hat) + g2,
    };
    if var <= 0.0 {
        // The score is identically zero and sign(0) = +1: half the test set is wrong.
        return Ok(0.5);
    }
    Ok(math::normal_cdf(-math::dot(mu_hat, mu) / math::sqrt(var)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquares {
    pub theta: Vec<f64>,
    /// True when the Gram matrix needed a `1e-8` ridge to factor.
    pub ridge_used: bool,
}

pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Minimiser of `sum (y_i - theta.x_i)^2` via the normal equations.
pub fn closed_form_least_squares(x: &Matrix, y: &[f64]) -> Result<LeastSquares> {
    if x.rows() != y.len() {
        bail!(Dimension, "{} rows but {} targets", x.rows(), y.len());
    }
    if x.rows() == 0 {
        bail!(Empty, "no rows");
    }
    let gram = x.gram();
    let rhs = x.t_matvec(y)?;
    if let Ok(theta) = gram.solve_spd(&rhs) {
        return Ok(LeastSquares { theta, ridge_used: false });
    }
    let mut ridged = gram;
    for i in 0..ridged.rows() {
        ridged[(i, i)] += RIDGE_FALLBACK;
    }
    match ridged.solve_spd(&rhs) {
        Ok(theta) => Ok(LeastSquares { theta, ridge_used: true }),
        Err(_) => bail!(Numerical, "Gram matrix is rank deficient even with a {} ridge", RIDGE_FALLBACK),
    }
}

/// Least-squares predictor under the training law itself (infinite data).
pub fn population_least_squares(config: &DataConfig, patterns: &GammaPatterns) -> Result<Vec<f64>> {
    let (p1, p2) = (config.p1, config.p2);
    let d = p1 + p2;
    let sigma1 = config.sigma1_matrix()?;
    let prior = [1.0 - config.class_balance, config.class_balance];
    let s2 = config.spu_noise_scale * config.spu_noise_scale;
    // E[y gamma] and E[gamma gamma'] over classes and uniform environments.
    let mut g = vec![0.0; p2];
    let mut gg = Matrix::zeros(p2, p2);
    for label in [-1, 1] {
        let w = prior[class_index(label)] / config.k as f64;
        for env in 1..=config.k as u32 {
            let pat = if p2 == 0 { &[][..] } else { patterns.pattern(label, env) };
            for a in 0..p2 {
                g[a] += w * f64::from(label) * f64::from(pat[a]);
                for b in 0..p2 {
                    gg[(a, b)] += w * f64::from(pat[a]) * f64::from(pat[b]);
                }
            }
        }
    }
    let mut m = Matrix::zeros(d, d);
    for a in 0..p1 {
        for b in 0..p1 {
            m[(a, b)] = config.mu[a] * config.mu[b] + sigma1[(a, b)];
        }
        for b in 0..p2 {
            m[(a, p1 + b)] = config.mu[a] * g[b];
            m[(p1 + b, a)] = config.mu[a] * g[b];
        }
    }
    for a in 0..p2 {
        for b in 0..p2 {
            m[(p1 + a, p1 + b)] = gg[(a, b)] + if a == b { s2 } else { 0.0 };
        }
    }
    let mut rhs = config.mu.clone();
    rhs.extend_from_slice(&g);
    m.solve_spd(&rhs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormComparison {
    pub gamma_norm_erm: f64,
    pub gamma_norm_disc: f64,
    /// `gamma_norm_disc / gamma_norm_erm`; infinite when the baseline norm is zero.
    pub ratio: f64,
    /// Strict `gamma_norm_disc < gamma_norm_erm`.
    pub ordered: bool,
}

/// Compares the spurious blocks (entries after the first `p1`) of two parameter vectors.
pub fn norm_comparison(theta_erm: &[f64], theta_disc: &[f64], p1: usize) -> Result<NormComparison> {
    if theta_erm.len() != theta_disc.len() || p1 > theta_erm.len() {
        bail!(Dimension, "parameter vectors of length {} and {} with p1 = {}", theta_erm.len(), theta_disc.len(), p1);
    }
    let gamma_norm_erm = math::norm(&theta_erm[p1..]);
    let gamma_norm_disc = math::norm(&theta_disc[p1..]);
    let ratio = if gamma_norm_erm > 0.0 { gamma_norm_disc / gamma_norm_erm } else { f64::INFINITY };
    Ok(NormComparison { gamma_norm_erm, gamma_norm_disc, ratio, ordered: gamma_norm_disc < gamma_norm_erm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeSensitivity {
    pub totals: Vec<f64>,
    /// Positions sorted by decreasing total; ties keep position order.
    pub ranking: Vec<usize>,
}

/// Per-concept sensitivity summed over epochs. Each row of `trajectory` is one epoch.
pub fn cumulative_sensitivity(trajectory: &[Vec<f64>]) -> Result<CumulativeSensitivity> {
    let Some(first) = trajectory.first() else { bail!(Empty, "no epochs recorded") };
    let m = first.len();
    let mut totals = vec![0.0; m];
    for epoch in trajectory {
        if epoch.len() != m {
            bail!(Dimension, "epoch with {} concepts among epochs with {}", epoch.len(), m);
        }
        for (t, s) in totals.iter_mut().zip(epoch) {
            *t += s;
        }
    }
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]));
    Ok(CumulativeSensitivity { totals, ranking })
}

/// [`cumulative_sensitivity`] over a run's sensitivity reports.
pub fn cumulative_from_reports(reports: &[SensitivityReport]) -> Result<CumulativeSensitivity> {
    let traj: Vec<Vec<f64>> = reports.iter().map(|r| r.sensitivity.clone()).collect();
    cumulative_sensitivity(&traj)
}
