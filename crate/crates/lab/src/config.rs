//! Experiment configuration: strict JSON with defaults for everything but the
//! problem size.

use std::path::{Path, PathBuf};

use disc_core::conceptbank::{CavParams, ConceptBank};
use disc_core::cure::MixupConfig;
use disc_core::discovery::EgmSign;
use disc_core::envcluster::GmmParams;
use disc_core::metrics::ErrorFormula;
use disc_core::model::{EncoderSpec, HeadKind, LossKind, ModelSpec};
use disc_core::synthdata::{Covariance, DataConfig};
use disc_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub bank: BankSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub p1: usize,
    pub p2: usize,
    pub n: usize,
    pub k: usize,
    /// Defaults to `1/sqrt(p1)` in every entry.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default = "default_sigma1")]
    pub sigma1: Covariance,
    #[serde(default = "one")]
    pub spu_noise_scale: f64,
    #[serde(default = "half")]
    pub class_balance: f64,
    #[serde(default = "default_k0")]
    pub k0: f64,
    #[serde(default = "half")]
    pub k1: f64,
    #[serde(default = "two")]
    pub k2: f64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Held-out rows from the training law, used for early stopping. 0 disables.
    #[serde(default = "default_n_val")]
    pub n_val: usize,
}

fn default_sigma1() -> Covariance {
    Covariance::Identity
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}
fn default_k0() -> f64 {
    0.2
}
fn default_n_test() -> usize {
    20_000
}
fn default_n_val() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    #[serde(default)]
    pub image_noise: f64,
    #[serde(default)]
    pub allowlist: Option<Vec<usize>>,
    #[serde(default = "default_n_samples")]
    pub n_pos: usize,
    #[serde(default = "default_n_samples")]
    pub n_neg: usize,
    #[serde(default = "default_svm_lambda")]
    pub svm_lambda: f64,
    #[serde(default = "default_svm_epochs")]
    pub svm_epochs: usize,
}

fn default_n_samples() -> usize {
    150
}
fn default_svm_lambda() -> f64 {
    1e-2
}
fn default_svm_epochs() -> usize {
    200
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            image_noise: 0.0,
            allowlist: None,
            n_pos: default_n_samples(),
            n_neg: default_n_samples(),
            svm_lambda: default_svm_lambda(),
            svm_epochs: default_svm_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderSpec,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_clusters")]
    pub k: usize,
    #[serde(default = "default_egm_batch")]
    pub egm_batch: usize,
    #[serde(default = "two")]
    pub beta1: f64,
    #[serde(default = "two")]
    pub beta2: f64,
    #[serde(default)]
    pub egm_sign: EgmSign,
    #[serde(default)]
    pub reference_epochs: Option<usize>,
    #[serde(default)]
    pub upweight_minority: bool,
    #[serde(default = "default_n_init")]
    pub gmm_n_init: usize,
    /// Record concept sensitivity during plain ERM/UW runs too.
    #[serde(default)]
    pub monitor_sensitivity: bool,
}

fn default_method() -> Method {
    Method::Disc
}
fn default_encoder() -> EncoderSpec {
    EncoderSpec::Identity
}
fn default_head() -> HeadKind {
    HeadKind::Single
}
fn default_loss() -> LossKind {
    LossKind::Squared
}
fn default_lr() -> f64 {
    5e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    40
}
fn default_patience() -> usize {
    10
}
fn default_clusters() -> usize {
    3
}
fn default_egm_batch() -> usize {
    128
}
fn default_n_init() -> usize {
    GmmParams::default().n_init
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every train field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub error_formula: ErrorFormula,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seeds: default_seeds(), error_formula: ErrorFormula::General }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, LabError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.eval.seeds.is_empty() {
            return Err(LabError::Config("eval.seeds must not be empty".into()));
        }
        if self.data.n_test == 0 {
            return Err(LabError::Config("data.n_test must be positive".into()));
        }
        self.data_config().validate().map_err(|e| LabError::Config(format!("data: {e}")))?;
        self.train_config().validate().map_err(|e| LabError::Config(format!("train: {e}")))?;
        self.bank().map_err(|e| LabError::Config(format!("bank: {e}")))?;
        if self.train.gmm_n_init == 0 {
            return Err(LabError::Config("train.gmm_n_init must be positive".into()));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        let d = &self.data;
        let mut c = DataConfig::new(d.p1, d.p2, d.n, d.k, self.seed);
        if let Some(mu) = &d.mu {
            c.mu = mu.clone();
        }
        c.sigma1 = d.sigma1.clone();
        c.spu_noise_scale = d.spu_noise_scale;
        c.class_balance = d.class_balance;
        c.k0 = d.k0;
        c.k1 = d.k1;
        c.k2 = d.k2;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            model: ModelSpec { encoder: t.encoder, head: t.head, loss: t.loss, bias: t.bias },
            lr: t.lr,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            max_epochs: t.max_epochs,
            patience: t.patience,
            k: t.k,
            egm_batch: t.egm_batch,
            mixup: MixupConfig { beta1: t.beta1, beta2: t.beta2 },
            egm_sign: t.egm_sign,
            reference_epochs: t.reference_epochs,
            upweight_minority: t.upweight_minority,
            gmm: GmmParams { n_init: t.gmm_n_init, ..GmmParams::default() },
            seed: self.seed,
        }
    }

    pub fn bank(&self) -> disc_core::Result<ConceptBank> {
        let b = &self.bank;
        let cav = CavParams { n_pos: b.n_pos, n_neg: b.n_neg, lambda: b.svm_lambda, epochs: b.svm_epochs };
        let bank = ConceptBank::synthetic(self.data.p1, self.data.p2, b.image_noise, cav)?;
        match &b.allowlist {
            Some(ids) => bank.with_allowlist(ids),
            None => Ok(bank),
        }
    }

    /// Copy with the seed (and the single-seed list) replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }
}
