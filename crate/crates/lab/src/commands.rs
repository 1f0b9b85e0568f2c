//! The subcommands, independent of argument parsing.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use disc_core::envcluster::{clustering_features, silhouette_score};
use disc_core::metrics;
use disc_core::synthdata::{LabeledDataset, CLASSES};
use disc_core::trainer::{self, Method};

use crate::aggregate::{self, Aggregate};
use crate::config::ExperimentConfig;
use crate::error::LabError;
use crate::io;
use crate::run::{self, ExperimentData, RunSummary, CONFIG_FILE};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CRAMERS_V_FILE: &str = "cramers_v.csv";
pub const K_SWEEP_FILE: &str = "k_sweep.csv";
pub const THREADS_ENV: &str = "DISC_LAB_THREADS";

/// Parses `A..B` (inclusive), `A..=B` or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, LabError> {
    let bad = || LabError::Config(format!("cannot parse seeds {s:?}; use A..B or a comma list"));
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(LabError::Config(format!("empty seed range {s:?}")));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

/// Worker count for sweeps: `DISC_LAB_THREADS` if set, else the machine's.
pub fn thread_count() -> Result<usize, LabError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(LabError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(format!("data_seed{}", cfg.seed))
}

pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}", method.name())
}

/// Writes the dataset bundle, its Cramér's V table and the resolved config.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentData, LabError> {
    let data = ExperimentData::generate(cfg)?;
    data.write(out)?;
    io::write_cramers_v(&out.join(CRAMERS_V_FILE), &data.cramers_v_rows(cfg.data.p1))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    Ok(data)
}

/// One run. Reads the dataset from `data` when given, else from the default
/// data directory if `gen-data` filled it, else generates it in memory.
pub fn train(cfg: &ExperimentConfig, data: Option<&Path>, out: &Path) -> Result<RunSummary, LabError> {
    let default_dir = data_dir(cfg);
    let source = data.map(Path::to_path_buf).or_else(|| default_dir.join(run::TRAIN_FILE).is_file().then_some(default_dir));
    let data = match source {
        Some(dir) => ExperimentData::read(&dir).with_context(|| format!("loading data from {}", dir.display()))?,
        None => ExperimentData::generate(cfg)?,
    };
    run::execute(cfg, &data, out)
}

/// Every (method, seed) cell into `out/<method>_seed<seed>`, in parallel,
/// followed by `summary.json`.
pub fn sweep(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out: &Path,
    threads: usize,
) -> Result<Aggregate, LabError> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(LabError::Config("a sweep needs at least one method and one seed".into()));
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let cells: Vec<(Method, u64)> = seeds.iter().flat_map(|&s| methods.iter().map(move |&m| (m, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary, LabError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(method, seed)) = cells.get(i) else { break };
                let mut c = cfg.with_seed(seed);
                c.train.method = method;
                let r = ExperimentData::generate(&c)
                    .and_then(|d| run::execute(&c, &d, &out.join(run_dir_name(method, seed))));
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(cells.len());
    for r in results.into_inner().expect("workers have finished") {
        runs.push(r.expect("every cell ran")?);
    }
    let agg = aggregate::aggregate(&runs);
    io::write_json(&out.join(SUMMARY_FILE), &agg)?;
    Ok(agg)
}

/// One row of the cluster-count sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KRow {
    pub k: usize,
    /// Mean silhouette over classes, weighted by class size.
    pub silhouette: f64,
    pub worst_group_acc: f64,
}

/// For each `k`: cluster on the ERM reference, score the clustering, train
/// DISC on it and report test worst-group accuracy.
pub fn sweep_k(cfg: &ExperimentConfig, ks: &[usize], out: &Path) -> Result<Vec<KRow>, LabError> {
    if ks.iter().any(|&k| k < 2) {
        return Err(LabError::Config("silhouette needs k >= 2".into()));
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let data = ExperimentData::generate(cfg)?;
    let view = data.train.view();
    let val = data.validation.as_ref().map(LabeledDataset::grouped);
    let bank = cfg.bank()?;
    let mut rows = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.train.k = k;
        if !c.train.method.uses_discovery() {
            c.train.method = Method::Disc;
        }
        let tc = c.train_config();
        let setup = trainer::prepare_disc(&view, &bank, &tc)?;
        let mut weighted = 0.0;
        for (ci, _) in CLASSES.iter().enumerate() {
            let clusters = &setup.clusters.clusters[ci];
            let rows_of: Vec<usize> = clusters.iter().flatten().copied().collect();
            let assign: Vec<usize> =
                clusters.iter().enumerate().flat_map(|(j, members)| std::iter::repeat_n(j, members.len())).collect();
            let feats = clustering_features(&setup.reference, &data.train.features.select_rows(&rows_of))?;
            weighted += silhouette_score(&feats, &assign)? * rows_of.len() as f64;
        }
        let report = trainer::train_disc_with_setup(&view, val.as_ref(), &bank, &setup, &tc, None)?;
        let test = metrics::group_metrics(&report.classifier, &data.test.grouped())?;
        rows.push(KRow { k, silhouette: weighted / view.len() as f64, worst_group_acc: test.worst_acc });
    }
    let table: Vec<_> = rows.iter().map(|r| (r.k, r.silhouette, r.worst_group_acc)).collect();
    io::write_k_sweep(&out.join(K_SWEEP_FILE), &table)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    Ok(rows)
}
