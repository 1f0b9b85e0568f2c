//! File formats. Floats go out with 17 significant digits in data files and
//! shortest round-trip form elsewhere, so every file reads back bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use disc_core::conceptbank::CavSet;
use disc_core::discovery::SensitivityReport;
use disc_core::envcluster::ClassClusters;
use disc_core::model::Classifier;
use disc_core::synthdata::{LabeledDataset, CLASSES};
use disc_core::trainer::TrainReport;
use disc_core::Matrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))
}

pub fn exact(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// `feat_0,...,feat_{d-1},label,env_id`.
pub fn write_dataset(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    let d = data.features.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("feat_{j}")).collect();
    header.push("label".into());
    header.push("env_id".into());
    w.write_record(&header)?;
    for (i, row) in data.features.row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|&x| exact(x)).collect();
        rec.push(data.labels[i].to_string());
        rec.push(data.env_ids[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = csv_reader(path)?;
    let header = r.headers()?.clone();
    let n_cols = header.len();
    if n_cols < 2 || &header[n_cols - 2] != "label" || &header[n_cols - 1] != "env_id" {
        bail!("{}: header must end with label,env_id", path.display());
    }
    let d = n_cols - 2;
    for (j, name) in header.iter().take(d).enumerate() {
        if name != format!("feat_{j}") {
            bail!("{}: column {j} is {name:?}, expected feat_{j}", path.display());
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut env_ids = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let ctx = || format!("{} row {}", path.display(), line + 1);
        for field in rec.iter().take(d) {
            features.push(field.trim().parse::<f64>().with_context(ctx)?);
        }
        let label: i32 = rec[d].trim().parse().with_context(ctx)?;
        if !CLASSES.contains(&label) {
            bail!("{}: label {label} is not -1 or +1", ctx());
        }
        labels.push(label);
        env_ids.push(rec[d + 1].trim().parse().with_context(ctx)?);
    }
    let x = Matrix::from_vec(labels.len(), d, features)?;
    Ok(LabeledDataset::new(x, labels, env_ids)?)
}

/// `concept_id,v_0,...,v_{d-1}`.
pub fn write_cavs(path: &Path, cavs: &CavSet) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["concept_id".to_string()];
    header.extend((0..cavs.dim()).map(|j| format!("v_{j}")));
    w.write_record(&header)?;
    for (i, &id) in cavs.concept_ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(cavs.vector(i).iter().map(|&x| exact(x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads probe vectors back; margins are not stored and come back as NaN.
pub fn read_cavs(path: &Path) -> Result<CavSet> {
    let mut r = csv_reader(path)?;
    let d = r.headers()?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].trim().parse::<usize>()?);
        for f in rec.iter().skip(1) {
            data.push(f.trim().parse::<f64>()?);
        }
    }
    let vectors = Matrix::from_vec(ids.len(), d, data)?;
    Ok(CavSet { fit_margins: vec![f64::NAN; ids.len()], concept_ids: ids, vectors })
}

/// `index,class,cluster`: one line per training row.
pub fn write_clusters(path: &Path, clusters: &ClassClusters, labels: &[i32]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "class", "cluster"])?;
    for (i, (_, c)) in clusters.assignment_of(labels.len()).into_iter().enumerate() {
        w.write_record([i.to_string(), labels[i].to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,loss,avg_acc,worst_acc,mean_spurious_sensitivity`; missing values are empty.
pub fn write_metrics(path: &Path, report: &TrainReport, spurious_positions: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "loss", "avg_acc", "worst_acc", "mean_spurious_sensitivity"])?;
    for rec in &report.epochs {
        let (avg, worst) = match &rec.validation {
            Some(v) => (v.avg_acc.to_string(), v.worst_acc.to_string()),
            None => (String::new(), String::new()),
        };
        let sens = match &rec.sensitivity {
            Some(s) if !spurious_positions.is_empty() => s.mean_sensitivity(spurious_positions).to_string(),
            _ => String::new(),
        };
        w.write_record([rec.epoch.to_string(), rec.train_loss.to_string(), avg, worst, sens])?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,concept_id,sensitivity`, long format.
pub fn write_trajectory(path: &Path, reports: &[&SensitivityReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "concept_id", "sensitivity"])?;
    for r in reports {
        for (id, s) in r.concept_ids.iter().zip(&r.sensitivity) {
            w.write_record([r.epoch.to_string(), id.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch sensitivity in JSON. Columns of `cts` follow `concept_ids`,
/// rows are environments.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SensitivityJson {
    pub epoch: usize,
    pub concept_ids: Vec<usize>,
    pub sensitivity: Vec<f64>,
    /// Dominant class label (-1 or +1) per concept.
    pub dominant_class: Vec<i32>,
    /// Sampling distribution over concepts for class -1 and +1; null when
    /// that class had no sensitivity mass.
    pub probabilities: Vec<Option<Vec<f64>>>,
    pub cts: Vec<Vec<f64>>,
}

impl From<&SensitivityReport> for SensitivityJson {
    fn from(r: &SensitivityReport) -> Self {
        Self {
            epoch: r.epoch,
            concept_ids: r.concept_ids.clone(),
            sensitivity: r.sensitivity.clone(),
            dominant_class: r.dominant_labels(),
            probabilities: r.probabilities.clone(),
            cts: r.cts.row_iter().map(<[f64]>::to_vec).collect(),
        }
    }
}

/// `attribute,cramers_v`.
pub fn write_cramers_v(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["attribute", "cramers_v"])?;
    for (name, v) in rows {
        w.write_record([name.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `k,silhouette,worst_group_acc`.
pub fn write_k_sweep(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["k", "silhouette", "worst_group_acc"])?;
    for (k, s, a) in rows {
        w.write_record([k.to_string(), s.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Model checkpoint: the classifier plus enough to reload it for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub classifier: Classifier,
}
