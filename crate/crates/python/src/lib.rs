//! Python bindings: encoding, metrics, fold plans, FASTA parsing, the two
//! model families, checkpoints and cross-validation.

use std::path::PathBuf;

use capsprom_core::capsnet::{CapsPromConfig, MarginLossConfig};
use capsprom_core::checkpoint::{load_checkpoint as load_ckpt, save_checkpoint};
use capsprom_core::cnn::CnnConfig;
use capsprom_core::data::folds::stratified_assignments;
use capsprom_core::data::{load_dataset, parse_fasta as parse, LoadOptions};
use capsprom_core::encode;
use capsprom_core::metrics::ConfusionMatrix;
use capsprom_core::model::{Architecture, Model as CoreModel};
use capsprom_core::train::{cross_validate as run_cv, metrics_csv, ExperimentConfig, RunOptions};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One-hot rows (A, C, G, T) for a nucleotide string.
#[pyfunction]
fn one_hot(seq: &str) -> PyResult<Vec<Vec<f64>>> {
    let t = encode::one_hot(seq).map_err(value_err)?;
    Ok(t.data().chunks(4).map(<[f64]>::to_vec).collect())
}

/// Symbol indices 0..4 for a nucleotide string.
#[pyfunction]
fn tokenize(seq: &str) -> PyResult<Vec<u8>> {
    encode::tokenize(seq).map_err(value_err)
}

/// The six classification metrics from confusion counts, plus the names of
/// any that were undefined and reported as 0.
#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn metrics<'py>(py: Python<'py>, tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = ConfusionMatrix { tp, tn, fp, fn_ }.compute().map_err(value_err)?;
    let d = PyDict::new_bound(py);
    for (k, v) in ["prec", "sn", "f1", "sp", "acc", "mcc"].iter().zip(m.values()) {
        d.set_item(k, v)?;
    }
    d.set_item("undefined", m.undefined.describe())?;
    Ok(d)
}

/// Confusion counts `(tp, tn, fp, fn)` from predicted and true labels.
#[pyfunction]
fn confusion(predicted: Vec<u8>, actual: Vec<u8>) -> PyResult<(u64, u64, u64, u64)> {
    if predicted.len() != actual.len() {
        return Err(PyValueError::new_err("predicted and actual differ in length"));
    }
    let cm = ConfusionMatrix::from_pairs(predicted.into_iter().zip(actual)).map_err(value_err)?;
    Ok((cm.tp, cm.tn, cm.fp, cm.fn_))
}

/// Fold index of every record for a stratified k-fold plan over `labels`.
#[pyfunction]
#[pyo3(signature = (labels, k=5, seed=0))]
fn stratified_folds(labels: Vec<u8>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    stratified_assignments(&labels, k, seed).map_err(value_err)
}

/// `(id, sequence)` pairs from a FASTA file.
#[pyfunction]
fn parse_fasta(path: PathBuf) -> PyResult<Vec<(String, String)>> {
    let recs = parse(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(recs.into_iter().map(|r| (r.id, r.sequence)).collect())
}

fn tokens_of(seqs: &[String]) -> PyResult<Vec<Vec<u8>>> {
    seqs.iter().map(|s| encode::tokenize(s).map_err(value_err)).collect()
}

/// A trained or freshly initialised promoter classifier.
#[pyclass(module = "capsprom")]
struct Model {
    inner: CoreModel,
    seed: u64,
}

#[pymethods]
impl Model {
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().tensors().iter().map(|t| t.numel()).sum()
    }

    /// Promoter probability of each sequence.
    fn predict_proba(&self, py: Python<'_>, seqs: Vec<String>) -> PyResult<Vec<f64>> {
        let toks = tokens_of(&seqs)?;
        py.allow_threads(|| self.inner.predict_proba(toks.iter().map(Vec::as_slice)))
            .map_err(value_err)
    }

    /// Hard labels at `threshold`.
    #[pyo3(signature = (seqs, threshold=0.5))]
    fn predict(&self, py: Python<'_>, seqs: Vec<String>, threshold: f64) -> PyResult<Vec<u8>> {
        Ok(self
            .predict_proba(py, seqs)?
            .into_iter()
            .map(|p| capsprom_core::capsnet::predict(p, threshold))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, self.seed, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, seq_len={})", self.kind(), self.seq_len())
    }
}

/// A CapsProm model with the default architecture for `seq_len`.
#[pyfunction(name = "CapsProm")]
#[pyo3(signature = (seq_len=81, seed=0, routing_iters=3))]
fn new_capsprom(seq_len: usize, seed: u64, routing_iters: usize) -> PyResult<Model> {
    let config = CapsPromConfig {
        routing_iters,
        ..CapsPromConfig::for_length(seq_len)
    };
    let arch = Architecture::CapsProm {
        config,
        loss: MarginLossConfig::default(),
    };
    Ok(Model {
        inner: CoreModel::build(&arch, seed).map_err(value_err)?,
        seed,
    })
}

/// A CNNProm model with the shipped configuration for `dataset`.
#[pyfunction(name = "CnnProm")]
#[pyo3(signature = (dataset, seed=0))]
fn new_cnnprom(dataset: &str, seed: u64) -> PyResult<Model> {
    let key: capsprom_core::data::DatasetKey = dataset.parse().map_err(value_err)?;
    let config = CnnConfig::shipped(key.as_str()).ok_or_else(|| value_err("no shipped configuration"))?;
    Ok(Model {
        inner: CoreModel::build(&Architecture::CnnProm { config }, seed).map_err(value_err)?,
        seed,
    })
}

#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<Model> {
    let inner = load_ckpt(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(Model { inner, seed: 0 })
}

/// Runs cross-validation from a TOML experiment description and returns
/// the metrics table as CSV text.
#[pyfunction]
#[pyo3(signature = (config_toml, data_dir, jobs=1))]
fn cross_validate(py: Python<'_>, config_toml: &str, data_dir: PathBuf, jobs: usize) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(value_err)?;
    let opts = LoadOptions {
        strict_counts: cfg.data.strict_counts,
        drop_invalid: cfg.data.drop_invalid,
    };
    py.allow_threads(|| {
        let mut data = load_dataset(cfg.dataset, &data_dir, &opts).map_err(|e| e.to_string())?;
        if let Some(n) = cfg.data.subsample {
            data = data.stratified_subsample(n, cfg.seed);
        }
        let run = RunOptions {
            jobs: jobs.max(1),
            keep_models: false,
        };
        let (result, _) = run_cv(&cfg, &data, None, &run).map_err(|e| e.to_string())?;
        Ok::<_, String>(metrics_csv(&result))
    })
    .map_err(PyValueError::new_err)
}

#[pymodule]
fn capsprom(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_folds, m)?)?;
    m.add_function(wrap_pyfunction!(parse_fasta, m)?)?;
    m.add_function(wrap_pyfunction!(new_capsprom, m)?)?;
    m.add_function(wrap_pyfunction!(new_cnnprom, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
