//! Inferring training environments without group labels.
//!
//! Each class is clustered once with a diagonal Gaussian mixture over the
//! reference model's embeddings and class probabilities. Every epoch the
//! per-class clusters are paired up at random: environment `j` is the union of
//! one cluster from each class.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::Classifier;
use crate::rng;
use crate::synthdata::{TrainView, CLASSES};

/// EM stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this fraction.
    pub rel_tol: f64,
    pub var_floor: f64,
    /// Fresh k-means++ draws allowed when a component comes up empty.
    pub max_restarts: usize,
    /// Independent initialisations; the highest final log-likelihood wins.
    pub n_init: usize,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self { max_iter: 200, rel_tol: 1e-6, var_floor: 1e-6, max_restarts: 10, n_init: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub assignments: Vec<usize>,
    pub means: Matrix,
    /// Diagonal variances, one row per component.
    pub variances: Matrix,
    pub weights: Vec<f64>,
    pub responsibilities: Matrix,
    /// Total log-likelihood of the final parameters.
    pub loglik: f64,
    /// Log-likelihood after each E-step.
    pub loglik_trace: Vec<f64>,
}

fn kmeans_pp<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(0, 0);
    let _ = centers.push_row(points.row(rng::below(rng, n)));
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    while centers.rows() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng::uniform(rng) * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng::below(rng, n)
        };
        let _ = centers.push_row(points.row(pick));
        let c = centers.rows() - 1;
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Em<'a> {
    points: &'a Matrix,
    k: usize,
    params: GmmParams,
}

impl Em<'_> {
    /// Log-density of each point under each weighted component, n x k.
    fn log_joint(&self, means: &Matrix, vars: &Matrix, weights: &[f64]) -> Matrix {
        let q = self.points.cols();
        let log2pi = math::ln(2.0 * core::f64::consts::PI);
        let consts: Vec<f64> = (0..self.k)
            .map(|c| {
                let logdet: f64 = vars.row(c).iter().map(|v| math::ln(*v)).sum();
                math::ln(weights[c]) - 0.5 * (q as f64 * log2pi + logdet)
            })
            .collect();
        let mut out = Matrix::zeros(self.points.rows(), self.k);
        for (i, p) in self.points.row_iter().enumerate() {
            for c in 0..self.k {
                let quad: f64 =
                    p.iter().zip(means.row(c)).zip(vars.row(c)).map(|((x, m), v)| (x - m) * (x - m) / v).sum();
                out[(i, c)] = consts[c] - 0.5 * quad;
            }
        }
        out
    }

    /// Turns joint log-densities into responsibilities, returning the log-likelihood.
    fn e_step(&self, log_joint: &Matrix, resp: &mut Matrix) -> f64 {
        let mut ll = 0.0;
        for i in 0..log_joint.rows() {
            let row = log_joint.row(i);
            let lse = math::log_sum_exp(row);
            ll += lse;
            for (r, l) in resp.row_mut(i).iter_mut().zip(row) {
                *r = math::exp(l - lse);
            }
        }
        ll
    }

    fn m_step(&self, resp: &Matrix, means: &mut Matrix, vars: &mut Matrix, weights: &mut [f64]) {
        let (n, q) = self.points.shape();
        for c in 0..self.k {
            let nk: f64 = (0..n).map(|i| resp[(i, c)]).sum::<f64>().max(1e-300);
            weights[c] = nk / n as f64;
            let mut mean = vec![0.0; q];
            for (i, p) in self.points.row_iter().enumerate() {
                let r = resp[(i, c)];
                for (m, x) in mean.iter_mut().zip(p) {
                    *m += r * x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; q];
            for (i, p) in self.points.row_iter().enumerate() {
                let r = resp[(i, c)];
                for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
                    *v += r * (x - m) * (x - m);
                }
            }
            for v in var.iter_mut() {
                *v = (*v / nk).max(self.params.var_floor);
            }
            means.row_mut(c).copy_from_slice(&mean);
            vars.row_mut(c).copy_from_slice(&var);
        }
    }
}

fn hard_assign(resp: &Matrix) -> Vec<usize> {
    resp.row_iter()
        .map(|r| {
            let mut best = 0;
            for (c, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Diagonal-covariance Gaussian mixture fitted by EM from k-means++ starts.
pub fn fit_gmm<R: Rng + ?Sized>(points: &Matrix, k: usize, params: &GmmParams, rng: &mut R) -> Result<GmmFit> {
    let mut best: Option<GmmFit> = None;
    for _ in 0..params.n_init.max(1) {
        let fit = fit_gmm_once(points, k, params, rng)?;
        if best.as_ref().map_or(true, |b| fit.loglik > b.loglik) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one initialisation"))
}

fn fit_gmm_once<R: Rng + ?Sized>(points: &Matrix, k: usize, params: &GmmParams, rng: &mut R) -> Result<GmmFit> {
    let (n, q) = points.shape();
    if k == 0 {
        bail!(Config, "k must be positive");
    }
    if n < k {
        bail!(Config, "{} points cannot fill {} clusters", n, k);
    }
    if q == 0 {
        bail!(Dimension, "points have no features");
    }
    if !points.is_finite() {
        bail!(Numerical, "non-finite clustering features");
    }
    let em = Em { points, k, params: *params };
    let mut global_var = vec![0.0; q];
    for j in 0..q {
        global_var[j] = math::population_variance(&points.column(j)).max(params.var_floor);
    }
    for _attempt in 0..=params.max_restarts {
        let mut means = kmeans_pp(points, k, rng);
        let mut vars = Matrix::zeros(k, q);
        for c in 0..k {
            vars.row_mut(c).copy_from_slice(&global_var);
        }
        let mut weights = vec![1.0 / k as f64; k];
        let mut resp = Matrix::zeros(n, k);
        let mut ll = em.e_step(&em.log_joint(&means, &vars, &weights), &mut resp);
        let initial = hard_assign(&resp);
        if (0..k).any(|c| !initial.contains(&c)) {
            continue;
        }
        let mut trace = vec![ll];
        for _ in 0..params.max_iter {
            em.m_step(&resp, &mut means, &mut vars, &mut weights);
            let next = em.e_step(&em.log_joint(&means, &vars, &weights), &mut resp);
            trace.push(next);
            let done = (next - ll).abs() <= params.rel_tol * ll.abs();
            ll = next;
            if done {
                break;
            }
        }
        if !ll.is_finite() {
            bail!(Numerical, "mixture log-likelihood became non-finite");
        }
        let assignments = hard_assign(&resp);
        if (0..k).any(|c| !assignments.contains(&c)) {
            continue;
        }
        return Ok(GmmFit { assignments, means, variances: vars, weights, responsibilities: resp, loglik: ll, loglik_trace: trace });
    }
    bail!(Numerical, "a mixture component stayed empty after {} restarts", params.max_restarts)
}

/// Per-class clusters of training row indices, `clusters[class_index][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub k: usize,
    pub clusters: Vec<Vec<Vec<usize>>>,
}

impl ClassClusters {
    /// Cluster id of every row, for export.
    pub fn assignment_of(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); n];
        for (ci, per_class) in self.clusters.iter().enumerate() {
            for (j, rows) in per_class.iter().enumerate() {
                for &r in rows {
                    out[r] = (ci, j);
                }
            }
        }
        out
    }
}

/// Standardised `[embedding | class probabilities]` for each row.
pub fn clustering_features(reference: &Classifier, x: &Matrix) -> Result<Matrix> {
    let mut f = reference.embed(x)?.hstack(&reference.class_probabilities(x)?)?;
    standardize(&mut f);
    Ok(f)
}

/// Zero mean and unit variance per column; constant columns are only centred.
pub fn standardize(m: &mut Matrix) {
    for j in 0..m.cols() {
        let col = m.column(j);
        let mean = math::mean(&col);
        let sd = math::sqrt(math::population_variance(&col));
        let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        for r in 0..m.rows() {
            m[(r, j)] = (m[(r, j)] - mean) * scale;
        }
    }
}

/// Clusters one class's rows into `k` groups. `seed` keys the class's own stream.
pub fn cluster_class(
    view: &TrainView<'_>,
    reference: &Classifier,
    label: i32,
    k: usize,
    params: &GmmParams,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let rows = view.indices_of(label);
    if rows.len() < k {
        bail!(Config, "class {} has {} rows, fewer than k = {}", label, rows.len(), k);
    }
    if k == 1 {
        return Ok(vec![rows]);
    }
    let feats = clustering_features(reference, &view.features.select_rows(&rows))?;
    let mut r = rng::indexed_stream(seed, "cluster", crate::synthdata::class_index(label) as u64);
    let fit = fit_gmm(&feats, k, params, &mut r)?;
    let mut clusters = vec![Vec::new(); k];
    for (local, &c) in fit.assignments.iter().enumerate() {
        clusters[c].push(rows[local]);
    }
    Ok(clusters)
}

/// Clusters every class with `k` components.
pub fn cluster_per_class<R: Rng + ?Sized>(
    view: &TrainView<'_>,
    reference: &Classifier,
    k: usize,
    params: &GmmParams,
    rng: &mut R,
) -> Result<ClassClusters> {
    let seed = rng::child_seed(rng);
    let clusters =
        CLASSES.iter().map(|&y| cluster_class(view, reference, y, k, params, seed)).collect::<Result<Vec<_>>>()?;
    Ok(ClassClusters { k, clusters })
}

/// One epoch's environments: `environments[j]` holds row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentPartition {
    /// `pairing[class_index][j]` is the cluster of that class placed in environment `j`.
    pub pairing: Vec<Vec<usize>>,
    pub environments: Vec<Vec<usize>>,
}

impl EnvironmentPartition {
    pub fn k(&self) -> usize {
        self.environments.len()
    }
}

/// Shuffles cluster indices independently per class and unions the `j`-th of each.
pub fn build_environments<R: Rng + ?Sized>(clusters: &ClassClusters, rng: &mut R) -> EnvironmentPartition {
    let k = clusters.k;
    let pairing: Vec<Vec<usize>> = clusters.clusters.iter().map(|_| rng::permutation(rng, k)).collect();
    let environments = (0..k)
        .map(|j| {
            let mut env = Vec::new();
            for (ci, per_class) in clusters.clusters.iter().enumerate() {
                env.extend_from_slice(&per_class[pairing[ci][j]]);
            }
            env
        })
        .collect();
    EnvironmentPartition { pairing, environments }
}

/// Mean silhouette coefficient with Euclidean distances. Points alone in their
/// cluster score 0.
pub fn silhouette_score(points: &Matrix, assignments: &[usize]) -> Result<f64> {
    let n = points.rows();
    if assignments.len() != n {
        bail!(Dimension, "{} assignments for {} points", assignments.len(), n);
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let used = sizes.iter().filter(|&&s| s > 0).count();
    if used < 2 {
        bail!(Config, "silhouette needs at least two non-empty clusters");
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let p = points.row(i);
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += math::sqrt(sq_dist(p, points.row(j)));
            }
        }
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Dimension, "labelings of length {} and {}", a.len(), b.len());
    }
    let n = a.len();
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1;
    }
    let choose2 = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
