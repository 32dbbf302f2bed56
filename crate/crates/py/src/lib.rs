//! Python bindings: sweeps and Touchstone I/O, electrode simulation, dataset
//! synthesis, training, classification, metrics and t-SNE.
//!
//! Errors surface as `sparamdx.ConfigError`, `DataError` or `NumericError`,
//! all subclasses of `sparamdx.SparamdxError`.

use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sparamdx_core::datagen::{self, ChannelSelection, DatasetKind};
use sparamdx_core::defects::{dc_resistance, electrode_model_with, sweep_response, DefectLabel, N_CLASSES};
use sparamdx_core::embed::{self, TsneConfig};
use sparamdx_core::harness::{confusion, label_name, metrics_from_confusion, Metrics, TrainedModel};
use sparamdx_core::models::ArchKind;
use sparamdx_core::pipeline::{self, FailureKind, PipelineError, RunConfig};
use sparamdx_core::touchstone::{parse_touchstone, write_touchstone, SweepRecord, TouchstoneOptions};

create_exception!(sparamdx, SparamdxError, PyException);
create_exception!(sparamdx, ConfigError, SparamdxError);
create_exception!(sparamdx, DataError, SparamdxError);
create_exception!(sparamdx, NumericError, SparamdxError);

fn raise(e: impl Into<PipelineError>) -> PyErr {
    let e = e.into();
    let msg = e.to_string();
    match e.kind() {
        FailureKind::Config => ConfigError::new_err(msg),
        FailureKind::Data => DataError::new_err(msg),
        FailureKind::Numeric => NumericError::new_err(msg),
    }
}

fn config_err(msg: impl ToString) -> PyErr {
    ConfigError::new_err(msg.to_string())
}

fn data_err(msg: impl ToString) -> PyErr {
    DataError::new_err(msg.to_string())
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(config_err)
}

/// One two-port frequency sweep.
#[pyclass(name = "Sweep", module = "sparamdx", from_py_object)]
#[derive(Clone)]
struct PySweep {
    inner: SweepRecord,
}

#[pymethods]
impl PySweep {
    /// Parse Touchstone v1 `.s2p` text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_touchstone(text).map(|inner| Self { inner }).map_err(data_err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Touchstone text; `unit` is Hz/kHz/MHz/GHz and `fmt` RI/MA/DB.
    #[pyo3(signature = (unit = "GHz", fmt = "MA"))]
    fn to_touchstone(&self, unit: &str, fmt: &str) -> PyResult<String> {
        let opts: TouchstoneOptions = parse(&format!("# {unit} S {fmt} R {}", self.inner.z0_ohm))?;
        Ok(write_touchstone(&self.inner, &opts))
    }

    #[getter]
    fn frequencies(&self) -> Vec<f64> {
        self.inner.freqs_hz.clone()
    }

    #[getter]
    fn z0(&self) -> f64 {
        self.inner.z0_ohm
    }

    /// Complex values of one parameter: "s11", "s12", "s21" or "s22".
    fn s(&self, param: &str) -> PyResult<Vec<Complex64>> {
        let pick = match param.to_ascii_lowercase().as_str() {
            "s11" => |m: &sparamdx_core::network::SMatrix| m.s11,
            "s12" => |m: &sparamdx_core::network::SMatrix| m.s12,
            "s21" => |m: &sparamdx_core::network::SMatrix| m.s21,
            "s22" => |m: &sparamdx_core::network::SMatrix| m.s22,
            _ => return Err(config_err(format!("unknown parameter `{param}`"))),
        };
        Ok(self.inner.s.iter().map(pick).collect())
    }

    /// The classifier's feature vector: dB magnitudes, S11 block first.
    #[pyo3(signature = (channels = "S11+S21"))]
    fn features(&self, channels: &str) -> PyResult<Vec<f64>> {
        Ok(datagen::feature_vector(&self.inner, parse(channels)?))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let f = &self.inner.freqs_hz;
        format!("Sweep({} points, {:.4e}..{:.4e} Hz)", f.len(), f[0], f[f.len() - 1])
    }
}

/// Class names in label-index order.
#[pyfunction]
fn classes() -> Vec<&'static str> {
    (0..N_CLASSES).map(label_name).collect()
}

/// Simulated sweep of one electrode; `seed=None` gives the nominal device.
#[pyfunction]
#[pyo3(signature = (label, seed = None, config = None))]
fn simulate(label: &str, seed: Option<u64>, config: Option<&PyRunConfig>) -> PyResult<PySweep> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let m = electrode_model_with(&cfg.electrode, parse(label)?, seed);
    let inner = sweep_response(&m, &cfg.sweep).map_err(|e| raise(datagen::DataError::from(e)))?;
    Ok(PySweep { inner })
}

/// End-to-end DC resistance in ohms.
#[pyfunction]
#[pyo3(signature = (label, seed = None))]
fn dc_ohms(label: &str, seed: Option<u64>) -> PyResult<f64> {
    let params = RunConfig::default().electrode;
    Ok(dc_resistance(&electrode_model_with(&params, parse::<DefectLabel>(label)?, seed)))
}

/// Run configuration; the constructor takes TOML text, empty for defaults.
#[pyclass(name = "RunConfig", module = "sparamdx", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml_text = ""))]
    fn new(toml_text: &str) -> PyResult<Self> {
        let inner: RunConfig = toml::from_str(toml_text).map_err(config_err)?;
        inner.validate().map_err(raise)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string_pretty(&self.inner).map_err(config_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn sweep_points(&self) -> usize {
        self.inner.sweep.n_points
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.output.clone()
    }
}

/// Labelled feature matrix.
#[pyclass(name = "Dataset", module = "sparamdx", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Clean electrodes with the config's class counts; `kind` is "train"
    /// or "test" (the held-out pool noisy sets are drawn from).
    #[staticmethod]
    #[pyo3(signature = (config, kind = "train"))]
    fn synthesize(py: Python<'_>, config: &PyRunConfig, kind: &str) -> PyResult<Self> {
        let cfg = &config.inner;
        let (seed, kind) = match kind {
            "train" => (cfg.seeds.data, DatasetKind::Train),
            "test" => (cfg.seeds.test, DatasetKind::TestBase),
            _ => return Err(config_err(format!("unknown dataset kind `{kind}` (train or test)"))),
        };
        let inner = py
            .detach(|| {
                datagen::synthesize(&cfg.sweep, &cfg.electrode, ChannelSelection::Both, seed, cfg.train_counts, kind)
            })
            .map_err(raise)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        datagen::Dataset::load(&path).map(|inner| Self { inner }).map_err(raise)
    }

    fn save(&self, dir: PathBuf, name: &str) -> PyResult<PathBuf> {
        self.inner.save(&dir, name).map_err(raise)
    }

    /// Resampled copy with additive Gaussian noise of `power_db` dB² per
    /// feature; `counts` defaults to this set's class counts.
    #[pyo3(signature = (power_db, seed, counts = None))]
    fn noisy(&self, power_db: f64, seed: u64, counts: Option<[usize; N_CLASSES]>) -> PyResult<Self> {
        let counts = counts.unwrap_or_else(|| self.inner.counts());
        datagen::make_noisy_testset(&self.inner, power_db, counts, seed).map(|inner| Self { inner }).map_err(raise)
    }

    fn select(&self, channels: &str) -> PyResult<Self> {
        self.inner.select(parse(channels)?).map(|inner| Self { inner }).map_err(raise)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f32>> {
        self.inner.samples.iter().map(|s| s.features.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn channels(&self) -> &'static str {
        self.inner.channels.name()
    }

    fn counts(&self) -> [usize; N_CLASSES] {
        self.inner.counts()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// One trained fold model.
#[pyclass(name = "Model", module = "sparamdx")]
struct PyModel {
    inner: TrainedModel,
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    d.set_item("confusion", m.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

#[pymethods]
impl PyModel {
    /// Cross-validates `arch` on `channels` with the config's training
    /// settings and returns one model per fold.
    #[staticmethod]
    fn train(
        py: Python<'_>,
        config: &PyRunConfig,
        data: &PyDataset,
        arch: &str,
        channels: &str,
    ) -> PyResult<Vec<Self>> {
        let (arch, channels) = (parse::<ArchKind>(arch)?, parse::<ChannelSelection>(channels)?);
        let exp =
            py.detach(|| pipeline::train_experiment(&config.inner, &data.inner, arch, channels)).map_err(raise)?;
        Ok(exp.models.into_iter().map(|inner| Self { inner }).collect())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_model(&path).map(|inner| Self { inner }).map_err(raise)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.save(&mut buf).map_err(raise)?;
        std::fs::write(&path, buf).map_err(|e| data_err(format!("{}: {e}", path.display())))
    }

    /// `(class name, probabilities)` for one sweep.
    fn classify(&self, sweep: &PySweep) -> PyResult<(&'static str, Vec<f32>)> {
        let (class, probs) = pipeline::classify(&self.inner, &sweep.inner).map_err(raise)?;
        Ok((label_name(class), probs))
    }

    fn predict(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<usize>> {
        py.detach(|| self.inner.predict(&data.inner)).map_err(raise)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let m = py.detach(|| self.inner.evaluate(&data.inner)).map_err(raise)?;
        metrics_dict(py, &m)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn channels(&self) -> &'static str {
        self.inner.channels().name()
    }

    #[getter]
    fn fold(&self) -> usize {
        self.inner.header.fold
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        {
            let p = &self.inner.model.params;
            p.ids().map(|id| p.get(id).numel()).sum()
        }
    }
}

/// Macro precision/recall/F1, accuracy and the confusion matrix.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    if truth.len() != predicted.len() || truth.iter().chain(&predicted).any(|&c| c >= N_CLASSES) {
        return Err(config_err(format!("need equal-length label lists with values below {N_CLASSES}")));
    }
    let m = metrics_from_confusion(&confusion(&truth, &predicted)).map_err(raise)?;
    metrics_dict(py, &m)
}

/// Exact t-SNE to two dimensions.
#[pyfunction]
#[pyo3(signature = (points, seed = 0, perplexity = 30.0, iterations = 1000))]
fn tsne(
    py: Python<'_>,
    points: Vec<Vec<f64>>,
    seed: u64,
    perplexity: f64,
    iterations: usize,
) -> PyResult<Vec<[f64; 2]>> {
    let cfg = TsneConfig { perplexity, iterations, ..TsneConfig::default() };
    py.detach(|| embed::tsne(&points, &cfg, seed)).map(|e| e.points).map_err(raise)
}

#[pyfunction]
fn silhouette(points: Vec<[f64; 2]>, labels: Vec<usize>) -> PyResult<f64> {
    embed::silhouette(&points, &labels).map_err(raise)
}

#[pymodule]
fn sparamdx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", pipeline::VERSION)?;
    m.add("SparamdxError", py.get_type::<SparamdxError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PySweep>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    for f in [
        wrap_pyfunction!(classes, m)?,
        wrap_pyfunction!(simulate, m)?,
        wrap_pyfunction!(dc_ohms, m)?,
        wrap_pyfunction!(metrics, m)?,
        wrap_pyfunction!(tsne, m)?,
        wrap_pyfunction!(silhouette, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
