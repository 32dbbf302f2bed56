//! End-to-end runs: synthesis, noisy test sets, cross-validated training,
//! the evaluation matrix and latent-space embeddings, each stage persisted
//! under one output directory with a manifest that pins config and seeds.
//!
//! ```text
//! <output>/
//!   run.json                       config, config hash, crate version
//!   data/{train,test_base,noisy_<x>db}.{json,f32}, manifest.json
//!   models/<arch>_<channels>/fold<k>.ckpt, history.json
//!   models/manifest.json
//!   report/metrics.csv, metrics.txt, manifest.json
//!   embed/<arch>_<channels>_<noise>.{csv,svg}, silhouette.csv, manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{
    feature_vector, make_noisy_testset, synthesize, ChannelSelection, ClassCounts, DataError, Dataset, DatasetKind,
    NoisePreset, TEST_PRESETS, TRAIN_COUNTS,
};
use crate::defects::{electrode_model_with, sweep_response, DefectLabel, ElectrodeParams, SweepSpec, N_CLASSES};
use crate::embed::{embedding_csv, embedding_svg, silhouette, tsne, EmbedError, TsneConfig};
use crate::harness::{
    argmax, cross_validate, evaluate_matrix, label_name, noise_level, report_csv, report_text, CellResult,
    HarnessError, Prepared, TrainConfig, TrainOutcome, TrainedModel,
};
use crate::models::{ArchKind, Hyper, ModelError, Scale};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::touchstone::{write_touchstone, DataFormat, FreqUnit, SweepRecord, TouchstoneOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// Coarse failure class, stable across the error enums of every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Invalid settings; retrying with the same input cannot succeed.
    Config,
    /// Missing, unreadable or inconsistent files and records.
    Data,
    /// Non-finite values or singular networks during computation.
    Numeric,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::Config => "config",
            FailureKind::Data => "data",
            FailureKind::Numeric => "numeric",
        }
    }
}

fn data_kind(e: &DataError) -> FailureKind {
    match e {
        DataError::Config(_) => FailureKind::Config,
        DataError::Network(_) => FailureKind::Numeric,
        _ => FailureKind::Data,
    }
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Config(_) => FailureKind::Config,
            PipelineError::Io { .. } => FailureKind::Data,
            PipelineError::Data(d) => data_kind(d),
            PipelineError::Harness(h) => match h {
                HarnessError::Config(_) => FailureKind::Config,
                HarnessError::Model(ModelError::Tensor(_)) | HarnessError::Numeric(_) => FailureKind::Numeric,
                HarnessError::Model(ModelError::Descriptor(_)) => FailureKind::Config,
                HarnessError::Model(ModelError::InputLength { .. }) | HarnessError::Checkpoint(_) => FailureKind::Data,
                HarnessError::Data(d) => data_kind(d),
            },
            PipelineError::Embed(EmbedError::Degenerate) => FailureKind::Numeric,
            PipelineError::Embed(_) => FailureKind::Config,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub test: u64,
    pub noise: u64,
    pub folds: u64,
    pub train: u64,
    pub embed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1, test: 2, noise: 3, folds: 4, train: 5, embed: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSettings {
    /// Architecture whose latents are embedded.
    pub model: ArchKind,
    /// Fold whose model supplies the latents.
    pub fold: usize,
    /// Stratified subsample size per embedded set (exact t-SNE is O(N²)).
    pub max_points: usize,
    pub tsne: TsneConfig,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self { model: ArchKind::Cnn, fold: 0, max_points: 700, tsne: TsneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sweep: SweepSpec,
    pub electrode: ElectrodeParams,
    pub seeds: Seeds,
    pub train_counts: ClassCounts,
    pub noise: Vec<NoisePreset>,
    pub channels: Vec<ChannelSelection>,
    pub architectures: Vec<ArchKind>,
    pub scale: Scale,
    pub folds: usize,
    pub train: TrainConfig,
    /// Also evaluate on the clean held-out base set.
    pub include_clean: bool,
    pub embed: EmbedSettings,
    pub output: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale run: small presets and a 40-epoch budget so the full
    /// 45-model study fits in minutes on one core.
    fn default() -> Self {
        Self {
            sweep: SweepSpec::default(),
            electrode: ElectrodeParams::default(),
            seeds: Seeds::default(),
            train_counts: TRAIN_COUNTS,
            noise: TEST_PRESETS.to_vec(),
            channels: ChannelSelection::ALL.to_vec(),
            architectures: ArchKind::ALL.to_vec(),
            scale: Scale::Desk,
            folds: 5,
            train: TrainConfig {
                max_epochs: 40,
                early_stop_patience: 10,
                weight_decay: 0.05,
                ..TrainConfig::default()
            },
            include_clean: false,
            embed: EmbedSettings::default(),
            output: PathBuf::from("sparamdx-run"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.sweep.validate().map_err(PipelineError::Config)?;
        self.electrode.validate().map_err(PipelineError::Config)?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if let Some(c) = self.train_counts.iter().position(|&n| n < self.folds) {
            return bad(format!(
                "class {} has {} samples, fewer than {} folds",
                label_name(c),
                self.train_counts[c],
                self.folds
            ));
        }
        if self.channels.is_empty() || self.architectures.is_empty() {
            return bad("channels and architectures must be non-empty".into());
        }
        for p in &self.noise {
            if !p.power_db.is_finite() {
                return bad(format!("noise power {} dB is not finite", p.power_db));
            }
            if p.counts.iter().sum::<usize>() == 0 {
                return bad(format!("noise preset {} dB has no samples", p.power_db));
            }
        }
        if self.embed.fold >= self.folds {
            return bad(format!("embed.fold {} is not below folds {}", self.embed.fold, self.folds));
        }
        if self.embed.max_points as f64 <= 3.0 * self.embed.tsne.perplexity {
            return bad("embed.max_points must exceed three times the perplexity".into());
        }
        Ok(())
    }

    /// SHA-256 of the config with `output` blanked: where a run is written
    /// does not change what it contains.
    pub fn hash(&self) -> String {
        let located = RunConfig { output: PathBuf::new(), ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&located).expect("serializable")))
    }

    pub fn paths(&self) -> Layout {
        Layout { root: self.output.clone() }
    }
}

/// File locations under a run's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn embed(&self) -> PathBuf {
        self.root.join("embed")
    }
    pub fn experiment(&self, arch: ArchKind, ch: ChannelSelection) -> PathBuf {
        self.models().join(experiment_name(arch, ch))
    }
    pub fn checkpoint(&self, arch: ArchKind, ch: ChannelSelection, fold: usize) -> PathBuf {
        self.experiment(arch, ch).join(format!("fold{fold}.ckpt"))
    }
}

pub fn experiment_name(arch: ArchKind, ch: ChannelSelection) -> String {
    let ch = match ch {
        ChannelSelection::Both => "s11s21",
        ChannelSelection::S11 => "s11",
        ChannelSelection::S21 => "s21",
    };
    format!("{}_{ch}", arch.name().to_lowercase())
}

fn noisy_name(power_db: f64) -> String {
    format!("noisy_{}db", power_db).replace('.', "p").replace('-', "m")
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Provenance of one artifact directory: regenerating with `config` and
/// the same crate version reproduces every listed file bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    /// (file name, sha256) pairs in a fixed order.
    pub files: Vec<(String, String)>,
}

fn write_manifest(dir: &Path, stage: &str, cfg: &RunConfig, names: &[String]) -> Result<StageManifest, PipelineError> {
    let files =
        names.iter().map(|n| Ok((n.clone(), sha256_file(&dir.join(n))?))).collect::<Result<Vec<_>, PipelineError>>()?;
    let m = StageManifest {
        stage: stage.into(),
        version: VERSION.into(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds,
        files,
    };
    write(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&m).expect("serializable") + "\n"))?;
    Ok(m)
}

/// Records the full config next to the artifacts.
pub fn write_run_file(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    #[derive(Serialize)]
    struct Run<'a> {
        version: &'a str,
        config_hash: String,
        config: &'a RunConfig,
    }
    let path = cfg.output.join("run.json");
    let run = Run { version: VERSION, config_hash: cfg.hash(), config: cfg };
    write(&path, &(serde_json::to_string_pretty(&run).expect("serializable") + "\n"))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    /// Clean cross-validation pool (both channels).
    pub train: Dataset,
    /// Clean held-out electrodes the noisy sets are drawn from.
    pub test_base: Dataset,
}

pub fn synth(cfg: &RunConfig) -> Result<Datasets, PipelineError> {
    cfg.validate()?;
    let both = ChannelSelection::Both;
    let train = synthesize(&cfg.sweep, &cfg.electrode, both, cfg.seeds.data, cfg.train_counts, DatasetKind::Train)?;
    let test_base =
        synthesize(&cfg.sweep, &cfg.electrode, both, cfg.seeds.test, cfg.train_counts, DatasetKind::TestBase)?;
    Ok(Datasets { train, test_base })
}

pub fn save_datasets(cfg: &RunConfig, ds: &Datasets) -> Result<(), PipelineError> {
    let dir = cfg.paths().data();
    ds.train.save(&dir, "train")?;
    ds.test_base.save(&dir, "test_base")?;
    write_data_manifest(cfg)
}

/// Covers whichever datasets of this config are present, so `synth` and
/// `noise` can run as separate steps.
fn write_data_manifest(cfg: &RunConfig) -> Result<(), PipelineError> {
    let dir = cfg.paths().data();
    let stems = ["train".to_string(), "test_base".to_string()]
        .into_iter()
        .chain(cfg.noise.iter().map(|p| noisy_name(p.power_db)));
    let names: Vec<String> =
        stems.flat_map(|s| [format!("{s}.json"), format!("{s}.f32")]).filter(|n| dir.join(n).exists()).collect();
    write_manifest(&dir, "data", cfg, &names)?;
    Ok(())
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets, PipelineError> {
    let dir = cfg.paths().data();
    let train = Dataset::load(&dir.join("train.json"))?;
    let test_base = Dataset::load(&dir.join("test_base.json"))?;
    for ds in [&train, &test_base] {
        if ds.generation.sweep != cfg.sweep || ds.generation.electrode != cfg.electrode {
            return Err(PipelineError::Config(format!(
                "datasets in {} were generated with a different sweep or electrode config",
                dir.display()
            )));
        }
    }
    Ok(Datasets { train, test_base })
}

/// One noisy test set per configured preset, in config order.
pub fn noise_sets(cfg: &RunConfig, base: &Dataset) -> Result<Vec<Dataset>, PipelineError> {
    cfg.noise.iter().map(|p| Ok(make_noisy_testset(base, p.power_db, p.counts, cfg.seeds.noise)?)).collect()
}

pub fn save_noise_sets(cfg: &RunConfig, sets: &[Dataset]) -> Result<(), PipelineError> {
    let dir = cfg.paths().data();
    for ds in sets {
        let db = noise_level(ds).ok_or_else(|| PipelineError::Config("clean set passed as a noisy set".into()))?;
        ds.save(&dir, &noisy_name(db))?;
    }
    write_data_manifest(cfg)
}

pub fn load_noise_sets(cfg: &RunConfig) -> Result<Vec<Dataset>, PipelineError> {
    let dir = cfg.paths().data();
    cfg.noise.iter().map(|p| Ok(Dataset::load(&dir.join(format!("{}.json", noisy_name(p.power_db))))?)).collect()
}

/// Fold models of one architecture on one channel selection.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub arch: ArchKind,
    pub channels: ChannelSelection,
    pub models: Vec<TrainedModel>,
}

fn arch_tag(a: ArchKind) -> u64 {
    ArchKind::ALL.iter().position(|&k| k == a).unwrap() as u64
}

fn channel_tag(c: ChannelSelection) -> u64 {
    ChannelSelection::ALL.iter().position(|&k| k == c).unwrap() as u64
}

/// Cross-validates one architecture on one channel projection of `train`.
pub fn train_experiment(
    cfg: &RunConfig,
    train: &Dataset,
    arch: ArchKind,
    channels: ChannelSelection,
) -> Result<Experiment, PipelineError> {
    let ds = train.select(channels)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seeds.train, &[arch_tag(arch), channel_tag(channels)]),
        ..cfg.train.clone()
    };
    let models = cross_validate(&ds, &Hyper::preset(arch, cfg.scale), &train_cfg, cfg.folds, cfg.seeds.folds)?;
    Ok(Experiment { arch, channels, models })
}

/// Every configured (architecture, channel selection) pair, calling
/// `progress` after each.
pub fn train_all(
    cfg: &RunConfig,
    train: &Dataset,
    mut progress: impl FnMut(&Experiment),
) -> Result<Vec<Experiment>, PipelineError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &arch in &cfg.architectures {
        for &ch in &cfg.channels {
            let e = train_experiment(cfg, train, arch, ch)?;
            progress(&e);
            out.push(e);
        }
    }
    Ok(out)
}

pub fn save_experiments(cfg: &RunConfig, experiments: &[Experiment]) -> Result<(), PipelineError> {
    let layout = cfg.paths();
    let mut names = Vec::new();
    for e in experiments {
        let dir = layout.experiment(e.arch, e.channels);
        fs::create_dir_all(&dir).map_err(|err| io_err(&dir, err))?;
        let prefix = experiment_name(e.arch, e.channels);
        for (f, m) in e.models.iter().enumerate() {
            let path = layout.checkpoint(e.arch, e.channels, f);
            let mut bytes = Vec::new();
            m.save(&mut bytes)?;
            fs::write(&path, bytes).map_err(|err| io_err(&path, err))?;
            names.push(format!("{prefix}/fold{f}.ckpt"));
        }
        let history: Vec<Option<&TrainOutcome>> = e.models.iter().map(|m| m.outcome.as_ref()).collect();
        write(&dir.join("history.json"), &(serde_json::to_string_pretty(&history).expect("serializable") + "\n"))?;
        names.push(format!("{prefix}/history.json"));
    }
    write_manifest(&layout.models(), "train", cfg, &names)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(TrainedModel::load(&mut bytes.as_slice())?)
}

pub fn load_experiments(cfg: &RunConfig) -> Result<Vec<Experiment>, PipelineError> {
    let layout = cfg.paths();
    let mut out = Vec::new();
    for &arch in &cfg.architectures {
        for &ch in &cfg.channels {
            let models =
                (0..cfg.folds).map(|f| load_model(&layout.checkpoint(arch, ch, f))).collect::<Result<Vec<_>, _>>()?;
            if models.iter().any(|m| m.kind() != arch || m.channels() != ch) {
                return Err(PipelineError::Config(format!(
                    "checkpoints for {} do not match their directory",
                    experiment_name(arch, ch)
                )));
            }
            out.push(Experiment { arch, channels: ch, models });
        }
    }
    Ok(out)
}

/// The Table-II-shaped matrix; the clean base set is appended as a last
/// column when `include_clean` is set.
pub fn evaluate(
    cfg: &RunConfig,
    experiments: &[Experiment],
    noisy: &[Dataset],
    base: &Dataset,
) -> Result<Vec<CellResult>, PipelineError> {
    let mut sets = noisy.to_vec();
    if cfg.include_clean {
        sets.push(base.clone());
    }
    let models: Vec<Vec<TrainedModel>> = experiments.iter().map(|e| e.models.clone()).collect();
    Ok(evaluate_matrix(&models, &sets)?)
}

pub fn save_report(cfg: &RunConfig, cells: &[CellResult]) -> Result<(), PipelineError> {
    let dir = cfg.paths().report();
    write(&dir.join("metrics.csv"), &report_csv(cells))?;
    write(&dir.join("metrics.txt"), &report_text(cells))?;
    write_manifest(&dir, "eval", cfg, &["metrics.csv".into(), "metrics.txt".into()])?;
    Ok(())
}

/// t-SNE of one model's latents on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResult {
    pub arch: ArchKind,
    pub channels: ChannelSelection,
    pub noise_db: Option<f64>,
    pub labels: Vec<usize>,
    pub points: Vec<[f64; 2]>,
    pub silhouette: f64,
    /// KL(P || Q) after each t-SNE iteration.
    pub kl_history: Vec<f64>,
}

impl EmbedResult {
    pub fn name(&self) -> String {
        let noise = self.noise_db.map_or("clean".to_string(), |d| format!("{d}db"));
        format!("{}_{}", experiment_name(self.arch, self.channels), noise)
    }

    pub fn final_kl(&self) -> f64 {
        self.kl_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Class-stratified subsample of at most `max` rows, deterministic in `seed`.
pub fn stratified_subsample(labels: &[usize], max: usize, seed: u64) -> Vec<usize> {
    if labels.len() <= max {
        return (0..labels.len()).collect();
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[tags::SUBSAMPLE]));
    let mut picked = Vec::new();
    for c in 0..N_CLASSES {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let take = (rows.len() * max).div_ceil(labels.len()).min(rows.len());
        rows.shuffle(&mut rng);
        picked.extend_from_slice(&rows[..take]);
    }
    picked.sort_unstable();
    picked.truncate(max);
    picked
}

/// Latent vectors of `model` on (a subsample of) `ds`, embedded in 2-D.
pub fn embed_latents(
    model: &TrainedModel,
    ds: &Dataset,
    settings: &EmbedSettings,
    seed: u64,
) -> Result<EmbedResult, PipelineError> {
    let idx = stratified_subsample(&ds.labels(), settings.max_points, seed);
    let sub = ds.subset(&idx);
    let (_, latents) = model.infer(&model.prepare(&sub)?)?;
    let width = latents.len() / sub.len();
    let x: Vec<Vec<f64>> = latents.chunks(width).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let labels = sub.labels();
    let e = tsne(&x, &settings.tsne, derive_seed(seed, &[tags::TSNE]))?;
    let s = silhouette(&e.points, &labels)?;
    Ok(EmbedResult {
        arch: model.kind(),
        channels: model.channels(),
        noise_db: noise_level(ds),
        labels,
        kl_history: e.kl_history,
        points: e.points,
        silhouette: s,
    })
}

/// Embeds the configured model's latents for every channel selection on
/// the clean base set and on each noisy set.
pub fn embed_all(
    cfg: &RunConfig,
    experiments: &[Experiment],
    base: &Dataset,
    noisy: &[Dataset],
) -> Result<Vec<EmbedResult>, PipelineError> {
    let mut out = Vec::new();
    for e in experiments.iter().filter(|e| e.arch == cfg.embed.model) {
        let model =
            e.models.get(cfg.embed.fold).ok_or_else(|| PipelineError::Config("embed.fold out of range".into()))?;
        for (i, ds) in std::iter::once(base).chain(noisy).enumerate() {
            let seed = derive_seed(cfg.seeds.embed, &[channel_tag(e.channels), i as u64]);
            out.push(embed_latents(model, ds, &cfg.embed, seed)?);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Config(format!("no trained {} to embed", cfg.embed.model.name())));
    }
    Ok(out)
}

pub fn silhouette_csv(results: &[EmbedResult]) -> String {
    let mut s = String::from("model,channels,noise_db,n_points,silhouette,final_kl\n");
    for r in results {
        let noise = r.noise_db.map_or("clean".to_string(), |d| format!("{d}"));
        s += &format!(
            "{},{},{noise},{},{:.6},{:.6}\n",
            r.arch.name(),
            r.channels,
            r.points.len(),
            r.silhouette,
            r.final_kl()
        );
    }
    s
}

pub fn save_embeddings(cfg: &RunConfig, results: &[EmbedResult]) -> Result<(), PipelineError> {
    let dir = cfg.paths().embed();
    let mut names = Vec::new();
    for r in results {
        let name = r.name();
        let title =
            format!("{} {} {}", r.arch.name(), r.channels, r.noise_db.map_or("clean".into(), |d| format!("{d} dB")));
        write(&dir.join(format!("{name}.csv")), &embedding_csv(&r.points, &r.labels))?;
        write(&dir.join(format!("{name}.svg")), &embedding_svg(&r.points, &r.labels, &title))?;
        names.push(format!("{name}.csv"));
        names.push(format!("{name}.svg"));
    }
    write(&dir.join("silhouette.csv"), &silhouette_csv(results))?;
    names.push("silhouette.csv".into());
    write_manifest(&dir, "embed", cfg, &names)?;
    Ok(())
}

/// Everything a full run produced, kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub datasets: Datasets,
    pub noisy: Vec<Dataset>,
    pub experiments: Vec<Experiment>,
    pub cells: Vec<CellResult>,
    pub embeddings: Vec<EmbedResult>,
}

/// All stages in order, persisting each; `progress` receives a short line
/// per finished step.
pub fn run_all(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    write_run_file(cfg)?;
    let datasets = synth(cfg)?;
    save_datasets(cfg, &datasets)?;
    progress("synth: done");
    let noisy = noise_sets(cfg, &datasets.test_base)?;
    save_noise_sets(cfg, &noisy)?;
    progress("noise: done");
    let experiments =
        train_all(cfg, &datasets.train, |e| progress(&format!("train: {} done", experiment_name(e.arch, e.channels))))?;
    save_experiments(cfg, &experiments)?;
    let cells = evaluate(cfg, &experiments, &noisy, &datasets.test_base)?;
    save_report(cfg, &cells)?;
    progress("eval: done");
    let embeddings = if experiments.iter().any(|e| e.arch == cfg.embed.model) {
        let r = embed_all(cfg, &experiments, &datasets.test_base, &noisy)?;
        save_embeddings(cfg, &r)?;
        progress("embed: done");
        r
    } else {
        Vec::new()
    };
    Ok(RunOutput { datasets, noisy, experiments, cells, embeddings })
}

/// Predicted class index and probability vector for one measured sweep.
pub fn classify(model: &TrainedModel, rec: &SweepRecord) -> Result<(usize, Vec<f32>), PipelineError> {
    if rec.len() != model.header.n_points {
        return Err(PipelineError::Data(DataError::Malformed(format!(
            "sweep has {} points, model expects {}",
            rec.len(),
            model.header.n_points
        ))));
    }
    let features: Vec<f32> = feature_vector(rec, model.channels()).iter().map(|&v| v as f32).collect();
    let input_len = model.model.descriptor.input_len;
    let mut rows = model.header.standardizer.apply(&features);
    rows.resize(input_len, 0.0);
    let (probs, _) = model.infer(&Prepared { input_len, rows, labels: vec![0] })?;
    Ok((argmax(&probs), probs))
}

/// Re-sweeps the first electrode of each class in `ds` and writes it as
/// `<dir>/<class>.s2p` (MHz, dB/angle).
pub fn export_s2p(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let opts = TouchstoneOptions { unit: FreqUnit::MHz, format: DataFormat::DB, reference: 50.0 };
    let mut out = Vec::new();
    for label in DefectLabel::ALL {
        let Some(sample) = ds.samples.iter().find(|s| s.label == label) else { continue };
        let model = electrode_model_with(&ds.generation.electrode, label, Some(sample.base_seed));
        let rec = sweep_response(&model, &cfg.sweep).map_err(DataError::from)?;
        let path = dir.join(format!("{}.s2p", label.name().to_lowercase()));
        let mut text = format!("! {} electrode, variation seed {}\n", label.name(), sample.base_seed);
        text += &write_touchstone(&rec, &opts);
        write(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}
