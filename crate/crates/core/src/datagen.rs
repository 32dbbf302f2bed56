//! Labeled datasets of dB-magnitude feature vectors, noise injection and
//! on-disk persistence.
//!
//! A dataset on disk is a JSON manifest next to a flat little-endian `f32`
//! file holding the feature rows back to back.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::defects::{electrode_model_with, sweep_response, DefectLabel, ElectrodeParams, SweepSpec, N_CLASSES};
use crate::network::NetworkError;
use crate::rng::{derive_seed, rng_from_seed, tags, STREAM_VERSION};
use crate::touchstone::SweepRecord;

/// Magnitudes below this level (including exact zeros) are clamped.
pub const DB_FLOOR: f64 = -200.0;

/// Per-class sample counts in [`DefectLabel::ALL`] order.
pub type ClassCounts = [usize; N_CLASSES];

pub const TRAIN_COUNTS: ClassCounts = [220, 110, 112, 112, 110, 110, 112];

/// Noise level and class counts of one held-out test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePreset {
    pub power_db: f64,
    pub counts: ClassCounts,
}

pub const TEST_PRESETS: [NoisePreset; 3] = [
    NoisePreset { power_db: 0.0, counts: [1080, 520, 560, 560, 520, 520, 560] },
    NoisePreset { power_db: 5.0, counts: [1080, 600, 560, 560, 560, 560, 560] },
    NoisePreset { power_db: 10.0, counts: [1080, 560, 560, 560, 560, 560, 560] },
];

pub fn preset_for(power_db: f64) -> Option<NoisePreset> {
    TEST_PRESETS.iter().copied().find(|p| p.power_db == power_db)
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("class {0} has no samples in the base set")]
    EmptyClass(DefectLabel),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("checksum mismatch: manifest says {expected}, data hashes to {actual}")]
    Checksum { expected: String, actual: String },
}

fn io_err(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelSelection {
    #[serde(rename = "S11+S21")]
    Both,
    S11,
    S21,
}

impl ChannelSelection {
    pub const ALL: [ChannelSelection; 3] = [ChannelSelection::Both, ChannelSelection::S11, ChannelSelection::S21];

    pub fn name(self) -> &'static str {
        match self {
            ChannelSelection::Both => "S11+S21",
            ChannelSelection::S11 => "S11",
            ChannelSelection::S21 => "S21",
        }
    }

    pub fn n_blocks(self) -> usize {
        match self {
            ChannelSelection::Both => 2,
            _ => 1,
        }
    }

    pub fn feature_len(self, n_points: usize) -> usize {
        self.n_blocks() * n_points
    }
}

impl fmt::Display for ChannelSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "both" | "s11+s21" => Ok(ChannelSelection::Both),
            "s11" => Ok(ChannelSelection::S11),
            "s21" => Ok(ChannelSelection::S21),
            _ => Err(format!("unknown channel selection `{s}` (expected S11, S21 or S11+S21)")),
        }
    }
}

fn db(mag: f64) -> f64 {
    if mag > 0.0 {
        (20.0 * mag.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Per-point `20·log10|S11|` and/or `20·log10|S21|`, S11 first for `Both`.
pub fn feature_vector(rec: &SweepRecord, channels: ChannelSelection) -> Vec<f64> {
    let s11 = rec.s.iter().map(|s| db(s.s11.norm()));
    let s21 = rec.s.iter().map(|s| db(s.s21.norm()));
    match channels {
        ChannelSelection::S11 => s11.collect(),
        ChannelSelection::S21 => s21.collect(),
        ChannelSelection::Both => s11.chain(s21).collect(),
    }
}

/// Adds i.i.d. `N(0, 10^(power_db/10))` to every entry. `-inf` means no noise.
pub fn inject_noise(features: &[f64], power_db: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if power_db == f64::NEG_INFINITY {
        return features.to_vec();
    }
    let normal = Normal::new(0.0, 10f64.powf(power_db / 20.0)).expect("finite noise power");
    features.iter().map(|&x| x + normal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f32>,
    pub label: DefectLabel,
    pub channels: ChannelSelection,
    /// Variation seed of the electrode the sample was swept from.
    pub base_seed: u64,
    pub noise_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Train,
    TestBase,
    Noisy,
}

impl DatasetKind {
    fn tag(self) -> u64 {
        match self {
            DatasetKind::Train => tags::TRAIN_SET,
            DatasetKind::TestBase => tags::TEST_BASE,
            DatasetKind::Noisy => tags::NOISE,
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub kind: DatasetKind,
    pub stream_version: u64,
    pub sweep: SweepSpec,
    pub electrode: ElectrodeParams,
    pub master_seed: u64,
    pub counts: ClassCounts,
    pub noise: Option<NoiseGeneration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseGeneration {
    pub power_db: f64,
    pub seed: u64,
    /// Provenance hash of the base set the noisy samples were drawn from.
    pub base: String,
}

impl Generation {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: ChannelSelection,
    pub n_points: usize,
    pub samples: Vec<LabeledSample>,
    pub generation: Generation,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.channels.feature_len(self.n_points)
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = [0; N_CLASSES];
        for s in &self.samples {
            c[s.label.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    /// Generation config hash identifying the dataset.
    pub fn provenance(&self) -> String {
        self.generation.hash()
    }

    /// Restricts an `S11+S21` dataset to one channel (or returns a copy when
    /// the selection already matches).
    pub fn select(&self, channels: ChannelSelection) -> Result<Dataset, DataError> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        if self.channels != ChannelSelection::Both {
            return Err(DataError::Config(format!(
                "cannot derive {channels} features from a {} dataset",
                self.channels
            )));
        }
        let n = self.n_points;
        let range = match channels {
            ChannelSelection::S11 => 0..n,
            ChannelSelection::S21 => n..2 * n,
            ChannelSelection::Both => unreachable!(),
        };
        let samples = self
            .samples
            .iter()
            .map(|s| LabeledSample { features: s.features[range.clone()].to_vec(), channels, ..s.clone() })
            .collect();
        Ok(Dataset { channels, samples, ..self.clone() })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect(), ..self.clone() }
    }

    /// Raw little-endian `f32` rows.
    pub fn feature_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.feature_len() * 4);
        for s in &self.samples {
            for v in &s.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.feature_bytes()))
    }
}

fn sample_seed(kind: DatasetKind, master_seed: u64, class: usize, i: usize) -> u64 {
    derive_seed(master_seed, &[kind.tag(), class as u64, i as u64])
}

/// Sweeps `counts[c]` varied electrodes per class. Every sample's variation
/// seed is derived from `master_seed`, the dataset kind, the class and the
/// sample index, so generation order and parallelism cannot affect output.
pub fn synthesize(
    spec: &SweepSpec,
    params: &ElectrodeParams,
    channels: ChannelSelection,
    master_seed: u64,
    counts: ClassCounts,
    kind: DatasetKind,
) -> Result<Dataset, DataError> {
    spec.validate().map_err(DataError::Config)?;
    params.validate().map_err(DataError::Config)?;
    if kind == DatasetKind::Noisy {
        return Err(DataError::Config("noisy sets are derived with make_noisy_testset".into()));
    }
    let jobs: Vec<(DefectLabel, u64)> = DefectLabel::ALL
        .iter()
        .flat_map(|&l| (0..counts[l.index()]).map(move |i| (l, sample_seed(kind, master_seed, l.index(), i))))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(label, seed)| {
            let model = electrode_model_with(params, label, Some(seed));
            let rec = sweep_response(&model, spec)?;
            let features = feature_vector(&rec, channels).into_iter().map(|v| v as f32).collect();
            Ok(LabeledSample { features, label, channels, base_seed: seed, noise_db: None })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Ok(Dataset {
        channels,
        n_points: spec.n_points,
        samples,
        generation: Generation {
            kind,
            stream_version: STREAM_VERSION,
            sweep: *spec,
            electrode: params.clone(),
            master_seed,
            counts,
            noise: None,
        },
    })
}

/// The 886-sample clean training set with default electrode constants.
pub fn synthesize_training_set(
    spec: &SweepSpec,
    channels: ChannelSelection,
    master_seed: u64,
) -> Result<Dataset, DataError> {
    synthesize(spec, &ElectrodeParams::default(), channels, master_seed, TRAIN_COUNTS, DatasetKind::Train)
}

/// Clean held-out electrodes from which noisy test sets are drawn. Same
/// class counts as the training set, disjoint seed stream.
pub fn synthesize_test_base(
    spec: &SweepSpec,
    params: &ElectrodeParams,
    channels: ChannelSelection,
    master_seed: u64,
) -> Result<Dataset, DataError> {
    synthesize(spec, params, channels, master_seed, TRAIN_COUNTS, DatasetKind::TestBase)
}

/// Draws base samples uniformly with replacement, per class, and adds
/// white Gaussian noise until each class reaches its requested count.
pub fn make_noisy_testset(base: &Dataset, power_db: f64, counts: ClassCounts, seed: u64) -> Result<Dataset, DataError> {
    if power_db.is_nan() || power_db == f64::INFINITY {
        return Err(DataError::Config(format!("invalid noise power {power_db} dB")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, s) in base.samples.iter().enumerate() {
        by_class[s.label.index()].push(i);
    }
    let per_class = DefectLabel::ALL
        .par_iter()
        .map(|&label| {
            let c = label.index();
            if counts[c] == 0 {
                return Ok(Vec::new());
            }
            if by_class[c].is_empty() {
                return Err(DataError::EmptyClass(label));
            }
            let mut rng = rng_from_seed(derive_seed(seed, &[tags::NOISE, c as u64]));
            let mut out = Vec::with_capacity(counts[c]);
            for _ in 0..counts[c] {
                let src = &base.samples[by_class[c][rng.random_range(0..by_class[c].len())]];
                let clean: Vec<f64> = src.features.iter().map(|&v| v as f64).collect();
                let noisy = inject_noise(&clean, power_db, &mut rng);
                out.push(LabeledSample {
                    features: noisy.into_iter().map(|v| v as f32).collect(),
                    noise_db: Some(power_db),
                    ..src.clone()
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Dataset {
        channels: base.channels,
        n_points: base.n_points,
        samples: per_class.into_iter().flatten().collect(),
        generation: Generation {
            kind: DatasetKind::Noisy,
            counts,
            noise: Some(NoiseGeneration { power_db, seed, base: base.provenance() }),
            ..base.generation.clone()
        },
    })
}

/// Scalar mean per channel block and one pooled standard deviation,
/// fitted on training rows and applied to every input before the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub block_len: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset, indices: &[usize]) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::Config("cannot fit a standardizer on zero samples".into()));
        }
        let blocks = ds.channels.n_blocks();
        let n = ds.n_points;
        let mut mean = vec![0.0; blocks];
        let mut var = 0.0;
        for b in 0..blocks {
            let vals =
                || indices.iter().flat_map(|&i| ds.samples[i].features[b * n..(b + 1) * n].iter().map(|&v| v as f64));
            let count = (indices.len() * n) as f64;
            let m = vals().sum::<f64>() / count;
            var += vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count / blocks as f64;
            mean[b] = m;
        }
        // One shared scale keeps the additive dB noise isotropic across blocks.
        let std = vec![if var > 0.0 { var.sqrt() } else { 1.0 }; blocks];
        Ok(Self { block_len: n, mean, std })
    }

    pub fn apply(&self, features: &[f32]) -> Vec<f32> {
        features
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = (i / self.block_len).min(self.mean.len() - 1);
                ((v as f64 - self.mean[b]) / self.std[b]) as f32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generation: Generation,
    pub provenance: String,
    pub channels: ChannelSelection,
    pub n_points: usize,
    pub feature_len: usize,
    pub n_samples: usize,
    pub counts: ClassCounts,
    pub labels: Vec<DefectLabel>,
    pub base_seeds: Vec<u64>,
    pub data_file: String,
    pub sha256: String,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Dataset {
    pub fn manifest(&self, data_file: &str) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            generation: self.generation.clone(),
            provenance: self.provenance(),
            channels: self.channels,
            n_points: self.n_points,
            feature_len: self.feature_len(),
            n_samples: self.len(),
            counts: self.counts(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            base_seeds: self.samples.iter().map(|s| s.base_seed).collect(),
            data_file: data_file.to_string(),
            sha256: self.checksum(),
        }
    }

    /// Writes `<dir>/<name>.json` and `<dir>/<name>.f32`; returns the
    /// manifest path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf, DataError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let data_file = format!("{name}.f32");
        let data_path = dir.join(&data_file);
        fs::write(&data_path, self.feature_bytes()).map_err(|e| io_err(&data_path, e))?;
        let manifest_path = dir.join(format!("{name}.json"));
        let json = serde_json::to_string_pretty(&self.manifest(&data_file)).expect("serializable");
        fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Dataset, DataError> {
        let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Malformed(e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DataError::Malformed(format!("unsupported manifest version {}", m.format_version)));
        }
        let data_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.data_file);
        let bytes = fs::read(&data_path).map_err(|e| io_err(&data_path, e))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != m.sha256 {
            return Err(DataError::Checksum { expected: m.sha256, actual });
        }
        if m.feature_len != m.channels.feature_len(m.n_points)
            || bytes.len() != m.n_samples * m.feature_len * 4
            || m.labels.len() != m.n_samples
            || m.base_seeds.len() != m.n_samples
        {
            return Err(DataError::Malformed("sizes in manifest and data file disagree".into()));
        }
        let noise_db = m.generation.noise.as_ref().map(|n| n.power_db);
        let samples: Vec<LabeledSample> = bytes
            .chunks_exact((m.feature_len * 4).max(1))
            .zip(m.labels.iter().zip(&m.base_seeds))
            .map(|(row, (&label, &base_seed))| LabeledSample {
                features: row.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                label,
                channels: m.channels,
                base_seed,
                noise_db,
            })
            .collect();
        let ds = Dataset { channels: m.channels, n_points: m.n_points, samples, generation: m.generation };
        if ds.counts() != m.counts {
            return Err(DataError::Malformed("class counts disagree with labels".into()));
        }
        if ds.provenance() != m.provenance {
            return Err(DataError::Malformed("provenance hash does not match the generation record".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SMatrix;
    use num_complex::Complex64;

    fn thru_record(n: usize) -> SweepRecord {
        SweepRecord { freqs_hz: (1..=n).map(|i| i as f64 * 1e8).collect(), s: vec![SMatrix::thru(); n], z0_ohm: 50.0 }
    }

    #[test]
    fn thru_features() {
        let rec = thru_record(201);
        assert!(feature_vector(&rec, ChannelSelection::S11).iter().all(|&v| v == DB_FLOOR));
        assert!(feature_vector(&rec, ChannelSelection::S21).iter().all(|&v| v == 0.0));
        let both = feature_vector(&rec, ChannelSelection::Both);
        assert_eq!(both.len(), 402);
        assert_eq!(both[..201], feature_vector(&rec, ChannelSelection::S11)[..]);
    }

    #[test]
    fn db_of_half_magnitude() {
        let mut rec = thru_record(1);
        rec.s[0].s21 = Complex64::new(0.0, 0.5);
        let v = feature_vector(&rec, ChannelSelection::S21)[0];
        assert!((v - 20.0 * 0.5f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn no_noise_sentinel() {
        let x = vec![1.0, -3.0, 7.5];
        let mut rng = rng_from_seed(1);
        assert_eq!(inject_noise(&x, f64::NEG_INFINITY, &mut rng), x);
    }

    #[test]
    fn channel_selection_parsing() {
        assert_eq!("s11+S21".parse::<ChannelSelection>().unwrap(), ChannelSelection::Both);
        assert_eq!("S21".parse::<ChannelSelection>().unwrap(), ChannelSelection::S21);
        assert!("S12".parse::<ChannelSelection>().is_err());
        assert_eq!(serde_json::to_string(&ChannelSelection::Both).unwrap(), "\"S11+S21\"");
    }

    #[test]
    fn preset_totals() {
        let totals: Vec<usize> = TEST_PRESETS.iter().map(|p| p.counts.iter().sum()).collect();
        assert_eq!(totals, vec![4320, 4480, 4440]);
        assert_eq!(TRAIN_COUNTS.iter().sum::<usize>(), 886);
    }
}
