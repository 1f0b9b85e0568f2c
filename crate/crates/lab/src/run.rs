//! One training run end to end, and the dataset bundle it consumes.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use disc_core::conceptbank::ConceptBank;
use disc_core::metrics::{self, cumulative_from_reports, GroupMetrics};
use disc_core::model::{Classifier, Encoder};
use disc_core::rng;
use disc_core::synthdata::{self, GammaPatterns, LabeledDataset};
use disc_core::trainer::{self, DiscSetup, Method, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::LabError;
use crate::io;

/// Training, validation and test rows plus the planted patterns behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub patterns: GammaPatterns,
    pub train: LabeledDataset,
    pub validation: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const TEST_FILE: &str = "test.csv";
pub const PATTERNS_FILE: &str = "patterns.json";

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, LabError> {
        let data_cfg = cfg.data_config();
        let (patterns, train, test) = synthdata::generate_all(&data_cfg, cfg.data.n_test)?;
        let validation = if cfg.data.n_val > 0 {
            let val_cfg = synthdata::DataConfig { n: cfg.data.n_val, ..data_cfg.clone() };
            Some(synthdata::generate_train(&val_cfg, &patterns, &mut rng::stream(cfg.seed, "validation-data"))?)
        } else {
            None
        };
        Ok(Self { patterns, train, validation, test })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        io::write_dataset(&dir.join(TRAIN_FILE), &self.train)?;
        if let Some(v) = &self.validation {
            io::write_dataset(&dir.join(VALIDATION_FILE), v)?;
        }
        io::write_dataset(&dir.join(TEST_FILE), &self.test)?;
        io::write_json(&dir.join(PATTERNS_FILE), &self.patterns)
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let val_path = dir.join(VALIDATION_FILE);
        Ok(Self {
            patterns: io::read_json(&dir.join(PATTERNS_FILE))?,
            train: io::read_dataset(&dir.join(TRAIN_FILE))?,
            validation: if val_path.exists() { Some(io::read_dataset(&val_path)?) } else { None },
            test: io::read_dataset(&dir.join(TEST_FILE))?,
        })
    }

    /// Cramér's V of each spurious coordinate (thresholded at 0.5) and of the
    /// environment id against the label, on the training rows.
    pub fn cramers_v_rows(&self, p1: usize) -> Vec<(String, f64)> {
        let t = &self.train;
        let mut rows = Vec::new();
        for j in p1..t.features.cols() {
            let on: Vec<bool> = t.features.column(j).iter().map(|&x| x > 0.5).collect();
            // A coordinate that never crosses the threshold has no table to score.
            if let Ok(v) = metrics::cramers_v(&on, &t.labels) {
                rows.push((format!("feat_{j}>0.5"), v));
            }
        }
        if let Ok(v) = metrics::cramers_v(&t.env_ids, &t.labels) {
            rows.push(("env_id".to_string(), v));
        }
        rows
    }
}

/// Cumulative sensitivity of one concept over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTotal {
    pub concept_id: usize,
    pub name: String,
    pub category: String,
    pub total: f64,
}

/// The `report.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: bool,
    pub wall_clock_secs: f64,
    /// Misclassification rate on the test rows.
    pub test_error: f64,
    pub test: GroupMetrics,
    /// Closed-form test error of the linear classifier; null for other models.
    pub theory_error: Option<f64>,
    pub invariant_norm: Option<f64>,
    pub spurious_norm: Option<f64>,
    pub first_mean_spurious_sensitivity: Option<f64>,
    pub last_mean_spurious_sensitivity: Option<f64>,
    /// Concepts by decreasing cumulative sensitivity; empty without monitoring.
    pub cumulative: Vec<ConceptTotal>,
}

impl RunSummary {
    /// Theory error when available, otherwise the empirical one.
    pub fn error(&self) -> f64 {
        self.theory_error.unwrap_or(self.test_error)
    }
}

/// Bank positions of concepts that sit on planted spurious coordinates.
pub fn spurious_positions(bank: &ConceptBank, p1: usize, p2: usize) -> Vec<usize> {
    bank.concepts.iter().enumerate().filter(|(_, c)| (p1..p1 + p2).contains(&c.coordinate)).map(|(i, _)| i).collect()
}

/// `(mu_hat, gamma_hat)` of a linear single-output model without bias.
pub fn linear_weights(model: &Classifier, p1: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if !matches!(model.encoder, Encoder::Identity { .. }) || !model.is_single_output() || model.head_bias.is_some() {
        return None;
    }
    let theta = model.head.row(0);
    Some((theta[..p1].to_vec(), theta[p1..].to_vec()))
}

/// Everything one run produces, before it is written out.
pub struct RunOutcome {
    pub report: TrainReport,
    pub setup: Option<DiscSetup>,
    pub summary: RunSummary,
}

/// Trains `cfg.train.method` on `data` and evaluates it. Writes nothing.
pub fn run(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RunOutcome, LabError> {
    let start = Instant::now();
    let dc = cfg.data_config();
    if data.train.features.cols() != dc.input_dim() {
        return Err(LabError::Config(format!(
            "data has {} features, config p1 + p2 = {}",
            data.train.features.cols(),
            dc.input_dim()
        )));
    }
    let bank = cfg.bank()?;
    let tc: TrainConfig = cfg.train_config();
    let view = data.train.view();
    let val = data.validation.as_ref().map(LabeledDataset::grouped);
    let (report, setup) = match tc.method {
        Method::Erm if cfg.train.monitor_sensitivity => {
            let setup = trainer::prepare_disc(&view, &bank, &tc)?;
            (trainer::train_erm_monitored(&view, val.as_ref(), &bank, &setup, &tc)?, Some(setup))
        }
        Method::Erm | Method::Uw => (trainer::train(&data.train.grouped(), val.as_ref(), &bank, &tc)?, None),
        _ => {
            let setup = trainer::prepare_disc(&view, &bank, &tc)?;
            let g = if tc.upweight_minority {
                Some(trainer::uw_weights(&data.train.labels, &data.train.env_ids)?)
            } else {
                None
            };
            (trainer::train_disc_with_setup(&view, val.as_ref(), &bank, &setup, &tc, g.as_deref())?, Some(setup))
        }
    };
    let test = metrics::group_metrics(&report.classifier, &data.test.grouped())?;
    let predicted = report.classifier.predict_labels(&data.test.features)?;
    let wrong = predicted.iter().zip(&data.test.labels).filter(|(a, b)| a != b).count();
    let test_error = wrong as f64 / data.test.len() as f64;

    let (mut theory_error, mut invariant_norm, mut spurious_norm) = (None, None, None);
    if let Some((mu_hat, gamma_hat)) = linear_weights(&report.classifier, dc.p1) {
        let sigma1 = dc.sigma1_matrix()?;
        theory_error = Some(metrics::theoretical_test_error(
            &mu_hat,
            &gamma_hat,
            &dc.mu,
            &sigma1,
            dc.spu_noise_scale,
            cfg.eval.error_formula,
        )?);
        invariant_norm = Some(disc_core::math::norm(&mu_hat));
        spurious_norm = Some(disc_core::math::norm(&gamma_hat));
    }

    let spurious = spurious_positions(&bank, dc.p1, dc.p2);
    let reports: Vec<_> = report.epochs.iter().filter_map(|e| e.sensitivity.clone()).collect();
    let mean_at = |r: Option<&disc_core::discovery::SensitivityReport>| {
        r.filter(|_| !spurious.is_empty()).map(|r| r.mean_sensitivity(&spurious))
    };
    let cumulative = if reports.is_empty() {
        Vec::new()
    } else {
        let c = cumulative_from_reports(&reports)?;
        c.ranking
            .iter()
            .map(|&i| {
                let concept = &bank.concepts[i];
                ConceptTotal {
                    concept_id: concept.id,
                    name: concept.name.clone(),
                    category: concept.category.clone(),
                    total: c.totals[i],
                }
            })
            .collect()
    };
    let summary = RunSummary {
        method: tc.method,
        seed: cfg.seed,
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        diverged: report.diverged,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        test_error,
        test,
        theory_error,
        invariant_norm,
        spurious_norm,
        first_mean_spurious_sensitivity: mean_at(reports.first()),
        last_mean_spurious_sensitivity: mean_at(reports.last()),
        cumulative,
    };
    Ok(RunOutcome { report, setup, summary })
}

pub const CONFIG_FILE: &str = "resolved_config.json";
pub const SEED_FILE: &str = "seed.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "sensitivity_trajectory.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const CAVS_FILE: &str = "cavs.csv";
pub const BANK_FILE: &str = "bank.json";
pub const SENSITIVITY_DIR: &str = "sensitivity";

/// Runs and writes a complete run directory.
pub fn execute(cfg: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<RunSummary, LabError> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    std::fs::write(dir.join(SEED_FILE), format!("{}\n", cfg.seed))?;
    let outcome = run(cfg, data)?;
    write_outcome(cfg, data, &outcome, dir)?;
    Ok(outcome.summary)
}

fn write_outcome(cfg: &ExperimentConfig, data: &ExperimentData, o: &RunOutcome, dir: &Path) -> anyhow::Result<()> {
    let bank = cfg.bank()?;
    let spurious = spurious_positions(&bank, cfg.data.p1, cfg.data.p2);
    io::write_metrics(&dir.join(METRICS_FILE), &o.report, &spurious)?;
    io::write_json(&dir.join(BANK_FILE), &bank)?;
    let reports: Vec<_> = o.report.epochs.iter().filter_map(|e| e.sensitivity.as_ref()).collect();
    if !reports.is_empty() {
        io::write_trajectory(&dir.join(TRAJECTORY_FILE), &reports)?;
        let sdir = dir.join(SENSITIVITY_DIR);
        std::fs::create_dir_all(&sdir)?;
        for r in &reports {
            io::write_json(&sdir.join(format!("epoch_{:03}.json", r.epoch)), &io::SensitivityJson::from(*r))?;
        }
    }
    if let Some(setup) = &o.setup {
        io::write_clusters(&dir.join(CLUSTERS_FILE), &setup.clusters, &data.train.labels)?;
        io::write_cavs(&dir.join(CAVS_FILE), &setup.cavs)?;
        io::write_json(&dir.join("reference_sensitivity.json"), &io::SensitivityJson::from(&setup.reference_report))?;
    }
    let checkpoint = io::Checkpoint {
        method: o.summary.method.name().to_string(),
        seed: cfg.seed,
        epoch: o.report.best_epoch,
        classifier: o.report.classifier.clone(),
    };
    io::write_json(&dir.join(CHECKPOINT_FILE), &checkpoint)?;
    io::write_json(&dir.join(TRAIN_REPORT_FILE), &o.report)?;
    io::write_json(&dir.join(REPORT_FILE), &o.summary)
}
