//! Cross-validated training, evaluation metrics and the noise-level report.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{ChannelSelection, DataError, Dataset, Standardizer};
use crate::defects::{DefectLabel, N_CLASSES};
use crate::models::{ArchKind, ArchitectureDescriptor, Hyper, Mode, Model, ModelError};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping (on validation loss).
    pub early_stop_patience: usize,
    pub lr: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, max_epochs: 500, early_stop_patience: 20, lr: 1e-3, weight_decay: 0.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(HarnessError::Config("early_stop_patience must be below max_epochs".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(HarnessError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified k-fold split: each class is shuffled and dealt round-robin
/// into the folds, with one cursor shared by all classes so fold sizes
/// also differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Config(format!("k = {k}: need at least 2 folds")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[tags::FOLDS]));
    let mut assignment = vec![Vec::new(); k];
    let mut cursor = 0;
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(HarnessError::Config(format!("class {c} has {} samples, fewer than k = {k}", members.len())));
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[cursor % k].push(i);
            cursor += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut val = assignment[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> =
                (0..k).filter(|&o| o != f).flat_map(|o| assignment[o].iter().copied()).collect();
            train.sort_unstable();
            Fold { train, val }
        })
        .collect())
}

/// Model-ready rows: standardized, zero-padded to the model input length.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input_len: usize,
    pub rows: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(ds: &Dataset, standardizer: &Standardizer, input_len: usize) -> Result<Self, HarnessError> {
        let fl = ds.feature_len();
        if fl > input_len {
            return Err(HarnessError::Config(format!("feature length {fl} exceeds model input {input_len}")));
        }
        let mut rows = Vec::with_capacity(ds.len() * input_len);
        for s in &ds.samples {
            rows.extend(standardizer.apply(&s.features));
            rows.extend(std::iter::repeat_n(0.0, input_len - fl));
        }
        Ok(Self { input_len, rows, labels: ds.labels() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.input_len);
        for &i in idx {
            data.extend_from_slice(&self.rows[i * self.input_len..(i + 1) * self.input_len]);
        }
        Tensor::new(&[idx.len(), self.input_len], data).expect("consistent batch")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

const EVAL_BATCH: usize = 256;

/// Mean cross-entropy and accuracy of `model` in eval mode.
pub fn evaluate_loss(model: &Model<f32>, data: &Prepared, idx: &[usize]) -> Result<(f64, f64), HarnessError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::new(false, 0);
        let x = g.input(data.batch(chunk));
        let out = model.forward_graph(&mut g, x)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let l = g.cross_entropy(out.logits, &labels)?;
        loss += g.value(l).data()[0] as f64 * chunk.len() as f64;
        correct += g.value(out.logits).argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    let n = idx.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch Adam with early stopping on validation loss. On return the
/// model holds the parameters of the best validation epoch.
pub fn train(
    model: &mut Model<f32>,
    data: &Prepared,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(HarnessError::Config("training and validation splits must be non-empty".into()));
    }
    if data.input_len != model.descriptor.input_len {
        return Err(ModelError::InputLength { expected: model.descriptor.input_len, got: data.input_len }.into());
    }
    let mut adam =
        Adam::new(&model.params, AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[tags::SHUFFLE]));
    let mut order = train_idx.to_vec();
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut wait = 0usize;
    let mut history = Vec::new();
    model.set_mode(Mode::Train);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let grads = {
                let mut g = Graph::new(true, derive_seed(cfg.seed, &[tags::DROPOUT, epoch as u64, b as u64]));
                let x = g.input(data.batch(chunk));
                let out = model.forward_graph(&mut g, x)?;
                let loss = g.cross_entropy(out.logits, &labels)?;
                let lv = g.value(loss).data()[0] as f64;
                if !lv.is_finite() {
                    return Err(HarnessError::Numeric(format!("non-finite training loss at epoch {epoch}")));
                }
                loss_sum += lv * chunk.len() as f64;
                correct += g.value(out.logits).argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
                g.backward(loss)?.param_grads()
            };
            adam.step(&mut model.params, &grads)?;
        }
        model.set_mode(Mode::Eval);
        let (val_loss, val_acc) = evaluate_loss(model, data, val_idx)?;
        model.set_mode(Mode::Train);
        if !val_loss.is_finite() {
            return Err(HarnessError::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let n = train_idx.len() as f64;
        history.push(EpochRecord { epoch, train_loss: loss_sum / n, train_acc: correct as f64 / n, val_loss, val_acc });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.early_stop_patience {
                break;
            }
        }
    }
    model.params = best.1;
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { history, best_epoch: best.2, best_val_loss: best.0 })
}

pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Confusion {
    let mut cm = [[0u64; N_CLASSES]; N_CLASSES];
    for (&t, &p) in truth.iter().zip(predicted) {
        cm[t][p] += 1;
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Precision,
    Recall,
    Accuracy,
    F1,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Precision, MetricKind::Recall, MetricKind::Accuracy, MetricKind::F1];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
        }
    }
}

/// Per-class one-vs-rest scores and their unweighted (macro) means over the
/// classes that occur in the truth or the predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Precision => self.precision,
            MetricKind::Recall => self.recall,
            MetricKind::Accuracy => self.accuracy,
            MetricKind::F1 => self.f1,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(cm: &Confusion) -> Result<Metrics, HarnessError> {
    let total: u64 = cm.iter().flatten().sum();
    if total == 0 {
        return Err(HarnessError::Config("confusion matrix is all zero".into()));
    }
    let mut per_class = Vec::with_capacity(N_CLASSES);
    let mut present = Vec::new();
    for c in 0..N_CLASSES {
        let tp = cm[c][c];
        let actual: u64 = cm[c].iter().sum();
        let predicted: u64 = cm.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.push(ClassMetrics { precision, recall, f1, support: actual });
        if actual + predicted > 0 {
            present.push(c);
        }
    }
    let mean =
        |f: fn(&ClassMetrics) -> f64| present.iter().map(|&c| f(&per_class[c])).sum::<f64>() / present.len() as f64;
    let trace: u64 = (0..N_CLASSES).map(|c| cm[c][c]).sum();
    Ok(Metrics {
        confusion: *cm,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        accuracy: trace as f64 / total as f64,
        per_class,
    })
}

/// Everything needed to apply a trained network to raw feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub descriptor: ArchitectureDescriptor,
    pub channels: ChannelSelection,
    pub n_points: usize,
    pub standardizer: Standardizer,
    pub fold: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub header: ModelHeader,
    pub model: Model<f32>,
    pub outcome: Option<TrainOutcome>,
}

impl TrainedModel {
    pub fn kind(&self) -> ArchKind {
        self.model.kind()
    }

    pub fn channels(&self) -> ChannelSelection {
        self.header.channels
    }

    /// Model-ready rows for `ds`, projecting an `S11+S21` set onto the
    /// model's channel selection when needed.
    pub fn prepare(&self, ds: &Dataset) -> Result<Prepared, HarnessError> {
        if ds.n_points != self.header.n_points {
            return Err(HarnessError::Config(format!(
                "dataset has {} points per channel, model expects {}",
                ds.n_points, self.header.n_points
            )));
        }
        let ds = ds.select(self.header.channels)?;
        Prepared::new(&ds, &self.header.standardizer, self.model.descriptor.input_len)
    }

    /// Class probabilities and latent vectors of every row of `data`.
    pub fn infer(&self, data: &Prepared) -> Result<(Vec<f32>, Vec<f32>), HarnessError> {
        let mut probs = Vec::with_capacity(data.len() * N_CLASSES);
        let mut latents = Vec::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (p, l) = self.model.forward_with_latent(&data.batch(chunk))?;
            probs.extend_from_slice(p.data());
            latents.extend_from_slice(l.data());
        }
        Ok((probs, latents))
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<usize>, HarnessError> {
        let (probs, _) = self.infer(&self.prepare(ds)?)?;
        Ok(probs.chunks(N_CLASSES).map(argmax).collect())
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Metrics, HarnessError> {
        metrics_from_confusion(&confusion(&ds.labels(), &self.predict(ds)?))
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), HarnessError> {
        let header = serde_json::to_string(&self.header).expect("serializable");
        write_checkpoint(w, &header, &self.model.params).map_err(|e| HarnessError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, HarnessError> {
        let ck = read_checkpoint(r).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        let header: ModelHeader =
            serde_json::from_str(&ck.header).map_err(|e| HarnessError::Checkpoint(format!("bad header: {e}")))?;
        let model = Model::from_params(&header.descriptor, ck.params)?;
        Ok(Self { header, model, outcome: None })
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains one model per fold of `ds`. Folds run in parallel; every fold's
/// initialization, shuffling and dropout streams derive from `cfg.seed`
/// and the fold index, so the result does not depend on thread count.
pub fn cross_validate(
    ds: &Dataset,
    hyper: &Hyper,
    cfg: &TrainConfig,
    k: usize,
    fold_seed: u64,
) -> Result<Vec<TrainedModel>, HarnessError> {
    cfg.validate()?;
    let folds = kfold_split(&ds.labels(), k, fold_seed)?;
    let descriptor = ArchitectureDescriptor::for_features(hyper.clone(), ds.channels.n_blocks(), ds.n_points);
    descriptor.validate()?;
    folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let standardizer = Standardizer::fit(ds, &fold.train)?;
            let data = Prepared::new(ds, &standardizer, descriptor.input_len)?;
            let mut model = Model::build(&descriptor, derive_seed(cfg.seed, &[tags::INIT, f as u64]))?;
            let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, &[tags::SHUFFLE, f as u64]), ..cfg.clone() };
            let outcome = train(&mut model, &data, &fold.train, &fold.val, &fold_cfg)?;
            let header = ModelHeader {
                descriptor: descriptor.clone(),
                channels: ds.channels,
                n_points: ds.n_points,
                standardizer,
                fold: f,
                best_epoch: outcome.best_epoch,
            };
            Ok(TrainedModel { header, model, outcome: Some(outcome) })
        })
        .collect()
}

/// Noise level of a test set; `None` marks clean data.
pub fn noise_level(ds: &Dataset) -> Option<f64> {
    ds.generation.noise.as_ref().map(|n| n.power_db)
}

/// Fold metrics of one (architecture, channel selection, test set) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: ArchKind,
    pub channels: ChannelSelection,
    pub noise_db: Option<f64>,
    pub folds: Vec<Metrics>,
}

impl CellResult {
    pub fn mean_std(&self, kind: MetricKind) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|m| m.get(kind)).collect::<Vec<_>>())
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates every fold model of every experiment on every test set.
/// Each experiment is the list of fold models of one architecture and
/// channel selection; test sets carry both channels and are projected as
/// needed.
pub fn evaluate_matrix(
    experiments: &[Vec<TrainedModel>],
    test_sets: &[Dataset],
) -> Result<Vec<CellResult>, HarnessError> {
    let mut jobs = Vec::new();
    for models in experiments {
        let first = models.first().ok_or_else(|| HarnessError::Config("experiment without fold models".into()))?;
        for ds in test_sets {
            jobs.push((first.kind(), first.channels(), models, ds));
        }
    }
    jobs.par_iter()
        .map(|&(model, channels, models, ds)| {
            let folds = models.iter().map(|m| m.evaluate(ds)).collect::<Result<Vec<_>, _>>()?;
            Ok(CellResult { model, channels, noise_db: noise_level(ds), folds })
        })
        .collect()
}

fn noise_label(n: Option<f64>) -> String {
    match n {
        Some(db) => format!("{db}"),
        None => "clean".into(),
    }
}

/// One line per (cell, metric): `model,channels,noise_db,metric,mean,std`.
pub fn report_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("model,channels,noise_db,metric,mean,std\n");
    for c in cells {
        for kind in MetricKind::ALL {
            let (m, s) = c.mean_std(kind);
            let _ = writeln!(
                out,
                "{},{},{},{},{m:.6},{s:.6}",
                c.model.name(),
                c.channels,
                noise_label(c.noise_db),
                kind.name()
            );
        }
    }
    out
}

/// Human-readable table: one row per model and channel selection, one
/// column group per noise level, values in percent as mean ± std.
pub fn report_text(cells: &[CellResult]) -> String {
    let mut noises: Vec<Option<f64>> = Vec::new();
    let mut rows: Vec<(ArchKind, ChannelSelection)> = Vec::new();
    for c in cells {
        if !noises.contains(&c.noise_db) {
            noises.push(c.noise_db);
        }
        if !rows.contains(&(c.model, c.channels)) {
            rows.push((c.model, c.channels));
        }
    }
    let mut out = String::new();
    for noise in &noises {
        let title = match noise {
            Some(db) => format!("Test noise {db} dB"),
            None => "Clean test data".to_string(),
        };
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:<12} {:<8}", "model", "channels");
        for k in MetricKind::ALL {
            let _ = write!(out, " {:>15}", k.name());
        }
        out.push('\n');
        for &(model, ch) in &rows {
            let Some(cell) = cells.iter().find(|c| c.model == model && c.channels == ch && c.noise_db == *noise) else {
                continue;
            };
            let _ = write!(out, "{:<12} {:<8}", model.name(), ch.name());
            for k in MetricKind::ALL {
                let (m, s) = cell.mean_std(k);
                let _ = write!(out, " {:>15}", format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Convenience for callers that only need class names for predictions.
pub fn label_name(i: usize) -> &'static str {
    DefectLabel::from_index(i).map_or("?", DefectLabel::name)
}
