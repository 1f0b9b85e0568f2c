//! Summaries across run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use disc_core::math;
use disc_core::trainer::Method;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::run::{ConceptTotal, RunSummary, REPORT_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub diverged: usize,
    pub mean_test_error: f64,
    pub sd_test_error: f64,
    pub mean_avg_acc: f64,
    pub mean_worst_group_acc: f64,
    pub mean_theory_error: Option<f64>,
    pub mean_spurious_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeed {
    pub seed: u64,
    pub erm_error: f64,
    pub disc_error: f64,
    pub erm_spurious_norm: Option<f64>,
    pub disc_spurious_norm: Option<f64>,
}

/// DISC against ERM on the seeds both were run with. Errors are the
/// closed-form ones when available, empirical otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub pairs: Vec<PairedSeed>,
    pub error_wins: usize,
    pub norm_wins: usize,
    pub win_rate: f64,
    pub mean_erm_error: f64,
    pub mean_disc_error: f64,
    /// `1 - mean_disc_error / mean_erm_error`.
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub methods: Vec<MethodSummary>,
    pub disc_vs_erm: Option<PairedComparison>,
    /// Cumulative sensitivity summed over every monitored run.
    pub ranking: Vec<ConceptTotal>,
}

fn sd(xs: &[f64]) -> f64 {
    math::sqrt(math::population_variance(xs))
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| math::mean(&v))
}

pub fn paired(runs: &[RunSummary], baseline: Method, treated: Method) -> Option<PairedComparison> {
    let base: BTreeMap<u64, &RunSummary> = runs.iter().filter(|r| r.method == baseline).map(|r| (r.seed, r)).collect();
    let pairs: Vec<PairedSeed> = runs
        .iter()
        .filter(|r| r.method == treated)
        .filter_map(|t| {
            base.get(&t.seed).map(|b| PairedSeed {
                seed: t.seed,
                erm_error: b.error(),
                disc_error: t.error(),
                erm_spurious_norm: b.spurious_norm,
                disc_spurious_norm: t.spurious_norm,
            })
        })
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let mut pairs = pairs;
    pairs.sort_by_key(|p| p.seed);
    let error_wins = pairs.iter().filter(|p| p.disc_error < p.erm_error).count();
    let norm_wins = pairs
        .iter()
        .filter(|p| matches!((p.disc_spurious_norm, p.erm_spurious_norm), (Some(d), Some(e)) if d < e))
        .count();
    let mean_erm_error = math::mean(&pairs.iter().map(|p| p.erm_error).collect::<Vec<_>>());
    let mean_disc_error = math::mean(&pairs.iter().map(|p| p.disc_error).collect::<Vec<_>>());
    Some(PairedComparison {
        error_wins,
        norm_wins,
        win_rate: error_wins as f64 / pairs.len() as f64,
        relative_reduction: if mean_erm_error > 0.0 { 1.0 - mean_disc_error / mean_erm_error } else { 0.0 },
        mean_erm_error,
        mean_disc_error,
        pairs,
    })
}

pub fn aggregate(runs: &[RunSummary]) -> Aggregate {
    let mut by_method: BTreeMap<Method, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method).or_default().push(r);
    }
    let methods = by_method
        .into_iter()
        .map(|(method, rs)| {
            let errors: Vec<f64> = rs.iter().map(|r| r.test_error).collect();
            MethodSummary {
                method,
                runs: rs.len(),
                diverged: rs.iter().filter(|r| r.diverged).count(),
                mean_test_error: math::mean(&errors),
                sd_test_error: sd(&errors),
                mean_avg_acc: math::mean(&rs.iter().map(|r| r.test.avg_acc).collect::<Vec<_>>()),
                mean_worst_group_acc: math::mean(&rs.iter().map(|r| r.test.worst_acc).collect::<Vec<_>>()),
                mean_theory_error: mean_of(rs.iter().map(|r| r.theory_error)),
                mean_spurious_norm: mean_of(rs.iter().map(|r| r.spurious_norm)),
            }
        })
        .collect();
    let mut totals: BTreeMap<usize, ConceptTotal> = BTreeMap::new();
    for c in runs.iter().flat_map(|r| &r.cumulative) {
        totals.entry(c.concept_id).or_insert_with(|| ConceptTotal { total: 0.0, ..c.clone() }).total += c.total;
    }
    let mut ranking: Vec<ConceptTotal> = totals.into_values().collect();
    ranking.sort_by(|a, b| b.total.total_cmp(&a.total).then(a.concept_id.cmp(&b.concept_id)));
    Aggregate { runs: runs.len(), methods, disc_vs_erm: paired(runs, Method::Erm, Method::Disc), ranking }
}

/// Every immediate subdirectory of `root` holding a run report, by name.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).with_context(|| format!("cannot list {}", root.display()))? {
        let path = entry?.path();
        if path.is_dir() && path.join(REPORT_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_runs(root: &Path) -> Result<Vec<RunSummary>> {
    run_dirs(root)?.iter().map(|d| io::read_json(&d.join(REPORT_FILE))).collect()
}

pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const METHODS_FILE: &str = "summary_by_method.csv";
pub const RANKING_FILE: &str = "cumulative_ranking.csv";
pub const PAIRED_FILE: &str = "paired_seeds.csv";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the aggregate of `root`'s run directories into `root`.
pub fn write_report(root: &Path) -> Result<Aggregate> {
    let runs = load_runs(root)?;
    if runs.is_empty() {
        anyhow::bail!("no run directories under {}", root.display());
    }
    let agg = aggregate(&runs);
    io::write_json(&root.join(AGGREGATE_FILE), &agg)?;

    let mut w = csv::Writer::from_path(root.join(METHODS_FILE))?;
    w.write_record([
        "method",
        "runs",
        "diverged",
        "mean_test_error",
        "sd_test_error",
        "mean_avg_acc",
        "mean_worst_group_acc",
        "mean_theory_error",
        "mean_spurious_norm",
    ])?;
    for m in &agg.methods {
        w.write_record([
            m.method.name().to_string(),
            m.runs.to_string(),
            m.diverged.to_string(),
            m.mean_test_error.to_string(),
            m.sd_test_error.to_string(),
            m.mean_avg_acc.to_string(),
            m.mean_worst_group_acc.to_string(),
            opt(m.mean_theory_error),
            opt(m.mean_spurious_norm),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(root.join(RANKING_FILE))?;
    w.write_record(["rank", "concept_id", "name", "category", "cumulative_sensitivity"])?;
    for (i, c) in agg.ranking.iter().enumerate() {
        w.write_record([(i + 1).to_string(), c.concept_id.to_string(), c.name.clone(), c.category.clone(), c.total.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(root.join(PAIRED_FILE))?;
    w.write_record(["seed", "erm_error", "disc_error", "erm_spurious_norm", "disc_spurious_norm"])?;
    for p in agg.disc_vs_erm.iter().flat_map(|c| &c.pairs) {
        w.write_record([
            p.seed.to_string(),
            p.erm_error.to_string(),
            p.disc_error.to_string(),
            opt(p.erm_spurious_norm),
            opt(p.disc_spurious_norm),
        ])?;
    }
    w.flush()?;
    Ok(agg)
}
