//! Training loops: plain ERM, group-upweighted ERM, and the discover-then-mix
//! loop with its ablations.
//!
//! The discovery loop first trains an ERM reference model and clusters each
//! class once on its features. Every epoch it re-pairs the clusters into
//! environments, measures concept sensitivity on the current model, and then
//! runs `ceil(n / B)` rounds in which each class in turn contributes one SGD
//! step on rows from the other classes mixed with that class's dominant
//! concepts.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conceptbank::{query_cavs, CavSet, ConceptBank};
use crate::cure::{build_intervened_batch, MixupConfig};
use crate::discovery::{discover, EgmSign, SensitivityReport};
use crate::envcluster::{build_environments, cluster_per_class, ClassClusters, GmmParams};
use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::metrics::{group_metrics, GroupMetrics};
use crate::model::{Classifier, ModelSpec};
use crate::rng::{self, StreamRng};
use crate::synthdata::{class_index, GroupedView, TrainView, CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Uw,
    Disc,
    DiscRandint,
    DiscReweight,
    DiscInadaptive,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Erm, Method::Uw, Method::Disc, Method::DiscRandint, Method::DiscReweight, Method::DiscInadaptive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Uw => "uw",
            Method::Disc => "disc",
            Method::DiscRandint => "disc_randint",
            Method::DiscReweight => "disc_reweight",
            Method::DiscInadaptive => "disc_inadaptive",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_discovery(self) -> bool {
        !matches!(self, Method::Erm | Method::Uw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a better validation worst-group accuracy before stopping; 0 disables.
    pub patience: usize,
    /// Clusters per class.
    pub k: usize,
    /// Rows per environment used for its gradient matrix.
    pub egm_batch: usize,
    pub mixup: MixupConfig,
    pub egm_sign: EgmSign,
    /// ERM epochs for the clustering reference; `None` means `max(5, max_epochs / 4)`.
    pub reference_epochs: Option<usize>,
    /// Also weight intervened rows by inverse group size (needs group labels).
    pub upweight_minority: bool,
    pub gmm: GmmParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Disc,
            model: ModelSpec::default(),
            lr: 5e-3,
            batch_size: 32,
            weight_decay: 0.0,
            max_epochs: 40,
            patience: 10,
            k: 3,
            egm_batch: 128,
            mixup: MixupConfig::default(),
            egm_sign: EgmSign::Descent,
            reference_epochs: None,
            upweight_minority: false,
            gmm: GmmParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative");
        }
        if self.max_epochs < 1 {
            bail!(Config, "max_epochs must be at least 1");
        }
        if self.batch_size < 1 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.method.uses_discovery() {
            if self.k < 1 {
                bail!(Config, "k must be at least 1");
            }
            if self.egm_batch < 1 {
                bail!(Config, "egm_batch must be at least 1");
            }
            self.mixup.validate()?;
        }
        Ok(())
    }

    pub fn reference_budget(&self) -> usize {
        self.reference_epochs.unwrap_or_else(|| (self.max_epochs / 4).max(5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub avg_acc: f64,
    pub worst_acc: f64,
}

impl From<&GroupMetrics> for ValidationScore {
    fn from(m: &GroupMetrics) -> Self {
        Self { avg_acc: m.avg_acc, worst_acc: m.worst_acc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss of the minibatches stepped on this epoch.
    pub train_loss: f64,
    pub validation: Option<ValidationScore>,
    /// Sensitivity of the model entering this epoch.
    pub sensitivity: Option<SensitivityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub classifier: Classifier,
    /// Epoch whose weights were kept (best validation worst-group accuracy, else the last).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: bool,
    /// The once-computed report a frozen-sensitivity run intervenes with.
    pub frozen_report: Option<SensitivityReport>,
}

impl TrainReport {
    /// Sensitivities per recorded epoch.
    pub fn sensitivity_trajectory(&self) -> Vec<Vec<f64>> {
        self.epochs.iter().filter_map(|e| e.sensitivity.as_ref().map(|s| s.sensitivity.clone())).collect()
    }
}

/// What the discovery loop builds before its first epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscSetup {
    pub reference: Classifier,
    pub clusters: ClassClusters,
    /// Probes on the reference encoder.
    pub cavs: CavSet,
    /// Sensitivity of the reference model, used by the frozen ablation.
    pub reference_report: SensitivityReport,
}

/// Inverse-group-size weights normalised to mean one.
pub fn uw_weights(labels: &[i32], env_ids: &[u32]) -> Result<Vec<f64>> {
    if labels.len() != env_ids.len() {
        bail!(Dimension, "{} labels and {} environment ids", labels.len(), env_ids.len());
    }
    if labels.is_empty() {
        bail!(Empty, "no rows");
    }
    let mut counts: alloc::collections::BTreeMap<(i32, u32), usize> = Default::default();
    for key in labels.iter().copied().zip(env_ids.iter().copied()) {
        *counts.entry(key).or_default() += 1;
    }
    let n = labels.len() as f64;
    let g = counts.len() as f64;
    Ok(labels.iter().zip(env_ids).map(|(&y, &e)| n / (g * counts[&(y, e)] as f64)).collect())
}

/// `exp(-sum_i P[y_j]_i max(0, cos(h_j, v_i)))` for each row `j`.
pub fn reweight_weights(
    embeddings: &Matrix,
    labels: &[i32],
    cavs: &CavSet,
    probabilities: &[Option<Vec<f64>>],
) -> Result<Vec<f64>> {
    if embeddings.cols() != cavs.dim() {
        bail!(Dimension, "embeddings of width {} against probes of width {}", embeddings.cols(), cavs.dim());
    }
    let mut w = Vec::with_capacity(labels.len());
    for (h, &y) in embeddings.row_iter().zip(labels) {
        let exponent = match probabilities.get(class_index(y)).and_then(Option::as_ref) {
            None => 0.0,
            Some(p) => p.iter().enumerate().filter(|(_, pi)| **pi > 0.0).map(|(i, pi)| pi * math::cosine(h, cavs.vector(i)).max(0.0)).sum(),
        };
        w.push(math::exp(-exponent));
    }
    Ok(w)
}

/// Per-run random streams, all derived from the run seed.
struct Streams {
    train: StreamRng,
    env: StreamRng,
    egm: StreamRng,
    cure: StreamRng,
    cavs: StreamRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            train: rng::stream(seed, "train"),
            env: rng::stream(seed, "environments"),
            egm: rng::stream(seed, "egm"),
            cure: rng::stream(seed, "cure"),
            cavs: rng::stream(seed, "cavs"),
        }
    }
}

enum StepOutcome {
    Ok(f64),
    Diverged,
}

fn step(
    model: &mut Classifier,
    x: &Matrix,
    labels: &[i32],
    weights: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let loss = model.batch_loss(x, labels, weights)?;
    if !loss.is_finite() {
        return Ok(StepOutcome::Diverged);
    }
    let grad = model.gradient(x, labels, weights)?;
    match model.sgd_step(&grad, config.lr, config.weight_decay) {
        Ok(next) => {
            *model = next;
            Ok(StepOutcome::Ok(loss))
        }
        Err(Error::Numerical(_)) => Ok(StepOutcome::Diverged),
        Err(e) => Err(e),
    }
}

/// One shuffled pass of minibatch SGD. `None` signals divergence.
fn plain_epoch<R: Rng + ?Sized>(
    model: &mut Classifier,
    view: &TrainView<'_>,
    weights: Option<&[f64]>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let perm = rng::permutation(rng, view.len());
    let mut total = 0.0;
    let mut steps = 0usize;
    for chunk in perm.chunks(config.batch_size) {
        let x = view.features.select_rows(chunk);
        let labels: Vec<i32> = chunk.iter().map(|&i| view.labels[i]).collect();
        let w: Option<Vec<f64>> = weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
        match step(model, &x, &labels, w.as_deref(), config)? {
            StepOutcome::Ok(l) => {
                total += l;
                steps += 1;
            }
            StepOutcome::Diverged => return Ok(None),
        }
    }
    Ok(Some(total / steps.max(1) as f64))
}

/// Early-stopping bookkeeping on validation worst-group accuracy.
struct Selector<'a> {
    validation: Option<&'a GroupedView<'a>>,
    patience: usize,
    best: Option<(f64, usize, Classifier)>,
}

impl<'a> Selector<'a> {
    fn new(validation: Option<&'a GroupedView<'a>>, patience: usize) -> Self {
        Self { validation, patience, best: None }
    }

    /// Scores the model after `epoch`; returns the score and whether to stop.
    fn observe(&mut self, model: &Classifier, epoch: usize) -> Result<(Option<ValidationScore>, bool)> {
        let Some(val) = self.validation else { return Ok((None, false)) };
        let score = ValidationScore::from(&group_metrics(model, val)?);
        let improved = self.best.as_ref().map_or(true, |(b, _, _)| score.worst_acc > *b);
        if improved {
            self.best = Some((score.worst_acc, epoch, model.clone()));
        }
        let since = epoch - self.best.as_ref().map_or(epoch, |b| b.1);
        Ok((Some(score), self.patience > 0 && since >= self.patience))
    }

    fn finish(self, last: Classifier, last_epoch: usize) -> (Classifier, usize) {
        match self.best {
            Some((_, epoch, model)) => (model, epoch),
            None => (last, last_epoch),
        }
    }
}

/// Sensitivity measured on a model without intervening, for plain runs.
struct Monitor<'a> {
    bank: &'a ConceptBank,
    setup: &'a DiscSetup,
}

fn current_cavs(
    model: &Classifier,
    bank: &ConceptBank,
    setup: &DiscSetup,
    rng: &mut StreamRng,
) -> Result<CavSet> {
    if model.encoder.is_trainable() {
        query_cavs(bank, &model.encoder, rng)
    } else {
        Ok(setup.cavs.clone())
    }
}

fn measure(
    model: &Classifier,
    view: &TrainView<'_>,
    bank: &ConceptBank,
    setup: &DiscSetup,
    config: &TrainConfig,
    epoch: usize,
    streams: &mut Streams,
) -> Result<SensitivityReport> {
    let cavs = current_cavs(model, bank, setup, &mut streams.cavs)?;
    let partition = build_environments(&setup.clusters, &mut streams.env);
    discover(model, view, &partition, &cavs, config.egm_batch, config.egm_sign, epoch, &mut streams.egm)
}

fn run_plain(
    view: &TrainView<'_>,
    validation: Option<&GroupedView<'_>>,
    config: &TrainConfig,
    weights: Option<&[f64]>,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainReport> {
    config.validate()?;
    if view.is_empty() {
        bail!(Empty, "no training rows");
    }
    let mut model = Classifier::init(&config.model, view.input_dim(), &mut rng::stream(config.seed, "init"))?;
    let mut streams = Streams::new(config.seed);
    let mut selector = Selector::new(validation, config.patience);
    let mut epochs = Vec::new();
    let mut diverged = false;
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let sensitivity = match &monitor {
            Some(m) => Some(measure(&model, view, m.bank, m.setup, config, epoch, &mut streams)?),
            None => None,
        };
        let loss = plain_epoch(&mut model, view, weights, config, &mut streams.train)?;
        let Some(train_loss) = loss else {
            epochs.push(EpochRecord { epoch, train_loss: f64::NAN, validation: None, sensitivity });
            diverged = true;
            break;
        };
        let (score, stop) = selector.observe(&model, epoch)?;
        epochs.push(EpochRecord { epoch, train_loss, validation: score, sensitivity });
        if stop {
            stopped_early = true;
            break;
        }
    }
    let last = epochs.len().saturating_sub(1);
    let (classifier, best_epoch) = selector.finish(model, last);
    Ok(TrainReport {
        method: config.method,
        seed: config.seed,
        epochs,
        classifier,
        best_epoch,
        stopped_early,
        diverged,
        frozen_report: None,
    })
}

/// Plain minibatch SGD on the unweighted mean loss.
pub fn train_erm(view: &TrainView<'_>, validation: Option<&GroupedView<'_>>, config: &TrainConfig) -> Result<TrainReport> {
    run_plain(view, validation, config, None, None)
}

/// ERM that also records the sensitivity of each epoch's starting model,
/// using the clusters and probes of `setup`.
pub fn train_erm_monitored(
    view: &TrainView<'_>,
    validation: Option<&GroupedView<'_>>,
    bank: &ConceptBank,
    setup: &DiscSetup,
    config: &TrainConfig,
) -> Result<TrainReport> {
    run_plain(view, validation, config, None, Some(Monitor { bank, setup }))
}

/// ERM with each row weighted by the inverse size of its (class, environment) group.
pub fn train_uw(data: &GroupedView<'_>, validation: Option<&GroupedView<'_>>, config: &TrainConfig) -> Result<TrainReport> {
    let w = uw_weights(data.labels, data.env_ids)?;
    run_plain(&data.without_groups(), validation, config, Some(&w), None)
}

/// Trains the ERM reference, clusters each class on it and fits the probes.
pub fn prepare_disc(view: &TrainView<'_>, bank: &ConceptBank, config: &TrainConfig) -> Result<DiscSetup> {
    config.validate()?;
    if bank.input_dim != view.input_dim() {
        bail!(Dimension, "bank images have {} coordinates, data rows {}", bank.input_dim, view.input_dim());
    }
    let reference_config = TrainConfig {
        method: Method::Erm,
        max_epochs: config.reference_budget().max(1),
        patience: 0,
        seed: rng::child_seed(&mut rng::stream(config.seed, "reference")),
        ..config.clone()
    };
    let reference = run_plain(view, None, &reference_config, None, None)?;
    if reference.diverged {
        bail!(Numerical, "the ERM reference model diverged");
    }
    let reference = reference.classifier;
    let clusters = cluster_per_class(view, &reference, config.k, &config.gmm, &mut rng::stream(config.seed, "cluster"))?;
    let cavs = query_cavs(bank, &reference.encoder, &mut rng::stream(config.seed, "reference-cavs"))?;
    let partition = build_environments(&clusters, &mut rng::stream(config.seed, "reference-environments"));
    let reference_report = discover(
        &reference,
        view,
        &partition,
        &cavs,
        config.egm_batch,
        config.egm_sign,
        0,
        &mut rng::stream(config.seed, "reference-egm"),
    )?;
    Ok(DiscSetup { reference, clusters, cavs, reference_report })
}

/// Any discovery-based method; dispatches on `config.method`.
pub fn train_disc(
    view: &TrainView<'_>,
    validation: Option<&GroupedView<'_>>,
    bank: &ConceptBank,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let setup = prepare_disc(view, bank, config)?;
    train_disc_with_setup(view, validation, bank, &setup, config, None)
}

/// The discovery loop from a prepared setup. `group_weights` are only
/// consulted when `config.upweight_minority` is set.
pub fn train_disc_with_setup(
    view: &TrainView<'_>,
    validation: Option<&GroupedView<'_>>,
    bank: &ConceptBank,
    setup: &DiscSetup,
    config: &TrainConfig,
    group_weights: Option<&[f64]>,
) -> Result<TrainReport> {
    config.validate()?;
    if !config.method.uses_discovery() {
        bail!(Config, "method {} does not use concept discovery", config.method.name());
    }
    let group_weights = if config.upweight_minority {
        match group_weights {
            Some(w) if w.len() == view.len() => Some(w),
            Some(w) => bail!(Dimension, "{} group weights for {} rows", w.len(), view.len()),
            None => bail!(Config, "upweight_minority needs group labels"),
        }
    } else {
        None
    };
    let mut model = Classifier::init(&config.model, view.input_dim(), &mut rng::stream(config.seed, "init"))?;
    let mut streams = Streams::new(config.seed);
    let mut selector = Selector::new(validation, config.patience);
    let mut epochs = Vec::new();
    let mut diverged = false;
    let mut stopped_early = false;
    let uniform = vec![1.0 / bank.len() as f64; bank.len()];
    let rounds = view.len().div_ceil(config.batch_size);
    for epoch in 0..config.max_epochs {
        let cavs = current_cavs(&model, bank, setup, &mut streams.cavs)?;
        let partition = build_environments(&setup.clusters, &mut streams.env);
        let report =
            discover(&model, view, &partition, &cavs, config.egm_batch, config.egm_sign, epoch, &mut streams.egm)?;
        let probabilities: Vec<Option<Vec<f64>>> = match config.method {
            Method::DiscRandint => vec![Some(uniform.clone()); CLASSES.len()],
            Method::DiscInadaptive => setup.reference_report.probabilities.clone(),
            _ => report.probabilities.clone(),
        };
        let outcome = if config.method == Method::DiscReweight {
            let h = model.embed(view.features)?;
            let mut w = reweight_weights(&h, view.labels, &cavs, &probabilities)?;
            if let Some(g) = group_weights {
                w.iter_mut().zip(g).for_each(|(a, b)| *a *= b);
            }
            plain_epoch(&mut model, view, Some(&w), config, &mut streams.train)?
        } else {
            intervened_epoch(&mut model, view, bank, &probabilities, group_weights, rounds, config, &mut streams.cure)?
        };
        let Some(train_loss) = outcome else {
            epochs.push(EpochRecord { epoch, train_loss: f64::NAN, validation: None, sensitivity: Some(report) });
            diverged = true;
            break;
        };
        let (score, stop) = selector.observe(&model, epoch)?;
        epochs.push(EpochRecord { epoch, train_loss, validation: score, sensitivity: Some(report) });
        if stop {
            stopped_early = true;
            break;
        }
    }
    let last = epochs.len().saturating_sub(1);
    let (classifier, best_epoch) = selector.finish(model, last);
    Ok(TrainReport {
        method: config.method,
        seed: config.seed,
        epochs,
        classifier,
        best_epoch,
        stopped_early,
        diverged,
        frozen_report: (config.method == Method::DiscInadaptive).then(|| setup.reference_report.clone()),
    })
}

#[allow(clippy::too_many_arguments)]
fn intervened_epoch<R: Rng + ?Sized>(
    model: &mut Classifier,
    view: &TrainView<'_>,
    bank: &ConceptBank,
    probabilities: &[Option<Vec<f64>>],
    group_weights: Option<&[f64]>,
    rounds: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for _ in 0..rounds {
        for (ci, &label) in CLASSES.iter().enumerate() {
            let p = probabilities.get(ci).and_then(Option::as_deref);
            let Some(batch) =
                build_intervened_batch(view, label, bank, p, config.batch_size, &config.mixup, rng)?
            else {
                continue;
            };
            let w: Option<Vec<f64>> = group_weights.map(|g| batch.rows.iter().map(|&i| g[i]).collect());
            match step(model, &batch.features, &batch.labels, w.as_deref(), config)? {
                StepOutcome::Ok(l) => {
                    total += l;
                    steps += 1;
                }
                StepOutcome::Diverged => return Ok(None),
            }
        }
    }
    Ok(Some(if steps == 0 { 0.0 } else { total / steps as f64 }))
}

/// Runs `config.method` on the dataset. Group labels reach only the
/// group-aware baseline and the optional minority upweighting.
pub fn train(
    data: &GroupedView<'_>,
    validation: Option<&GroupedView<'_>>,
    bank: &ConceptBank,
    config: &TrainConfig,
) -> Result<TrainReport> {
    match config.method {
        Method::Erm => train_erm(&data.without_groups(), validation, config),
        Method::Uw => train_uw(data, validation, config),
        _ => {
            let view = data.without_groups();
            let setup = prepare_disc(&view, bank, config)?;
            let g = if config.upweight_minority { Some(uw_weights(data.labels, data.env_ids)?) } else { None };
            train_disc_with_setup(&view, validation, bank, &setup, config, g.as_deref())
        }
    }
}
