//! Python bindings. Matrices cross the boundary as lists of rows; run-level
//! operations take a TOML config string and return plain dicts.

use std::path::{Path, PathBuf};

use mpsae::analysis::{self, CodeMatrix, Modality};
use mpsae::cli::{self, embfile, EmbeddingFile, RunConfig, ScalarWidth, SweepMode};
use mpsae::dictionary::{self, Dictionary};
use mpsae::encoders::{self, EncoderModel, StopRule};
use mpsae::generator::sample_batch;
use mpsae::numerics::{DenseMatrix, RngStream};
use mpsae::training::{self, BatchSource, RowSource, StepRecord, SyntheticSource};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(mpsae_py, MpsaeError, PyException);

type Rows = Vec<Vec<f64>>;

fn err(e: mpsae::Error) -> PyErr {
    MpsaeError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(err)
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn config(toml: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::from_toml(toml).map_err(err)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn labels_of(labels: Option<Vec<u8>>) -> PyResult<Option<Vec<Modality>>> {
    labels
        .map(|v| {
            v.into_iter()
                .map(|b| match b {
                    0 => Ok(Modality::Text),
                    1 => Ok(Modality::Image),
                    other => Err(PyValueError::new_err(format!("label {other} is neither 0 (text) nor 1 (image)"))),
                })
                .collect()
        })
        .transpose()
}

/// A trained or hand-built encoder with its dictionary.
#[pyclass(module = "mpsae_py", name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyModel {
    /// Load the model stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: training::load_checkpoint(&path).map_err(err)?.model })
    }

    /// Tied matching-pursuit model over unit-norm atoms given as columns of
    /// an `m x p` matrix, running a fixed number of steps.
    #[staticmethod]
    #[pyo3(signature = (atoms, steps, pre_bias = None))]
    fn mp(atoms: Vec<Vec<f64>>, steps: usize, pre_bias: Option<Vec<f64>>) -> PyResult<Self> {
        let a = matrix(atoms)?;
        let pre = pre_bias.unwrap_or_else(|| vec![0.0; a.rows()]);
        let d = Dictionary::new(a, pre, dictionary::NormMode::ExactUnit).map_err(err)?;
        Ok(Self { inner: EncoderModel::mp(d, StopRule::FixedSteps { steps }).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn latents(&self) -> usize {
        self.inner.latents()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    /// Dictionary atoms as an `m x p` list of rows.
    fn atoms(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.atoms())
    }

    fn pre_bias(&self) -> Vec<f64> {
        self.inner.pre_bias().to_vec()
    }

    /// Dense codes, one row per input.
    fn encode(&self, py: Python<'_>, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let xs = matrix(xs)?;
        let codes = py.detach(|| encoders::encode_rows(&self.inner, &xs)).map_err(err)?;
        Ok(codes.into_iter().map(|c| c.into_values()).collect())
    }

    /// Reconstructions, one row per input.
    fn reconstruct(&self, py: Python<'_>, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let xs = matrix(xs)?;
        let codes = py.detach(|| encoders::encode_rows(&self.inner, &xs)).map_err(err)?;
        Ok(codes.iter().map(|c| encoders::decode(&self.inner, c)).collect())
    }

    /// Selected `(atom, coefficient)` pairs of every pursuit step.
    fn mp_trace(&self, x: Vec<f64>) -> PyResult<Vec<(usize, f64)>> {
        let (_, trace) = encoders::encode_mp(&self.inner, &x).map_err(err)?;
        Ok(trace.steps.iter().map(|s| (s.index, s.coefficient)).collect())
    }

    /// Reconstruction quality at each inference-time sparsity level.
    fn sweep_k(&self, py: Python<'_>, xs: Vec<Vec<f64>>, ks: Vec<usize>) -> PyResult<Py<PyAny>> {
        let xs = matrix(xs)?;
        let sweep = py.detach(|| analysis::sweep_inference_k(&self.inner, &xs, &ks)).map_err(err)?;
        to_py(py, &sweep)
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={}, dim={}, latents={})", self.inner.variant.name(), self.dim(), self.latents())
    }
}

/// Step-by-step training on synthetic data or on in-memory rows.
#[pyclass(module = "mpsae_py", name = "Trainer", unsendable)]
struct PyTrainer {
    inner: training::Trainer,
    source: Box<dyn BatchSource>,
}

#[pymethods]
impl PyTrainer {
    /// Train on fresh samples from the hierarchical generator described by
    /// the config.
    #[staticmethod]
    #[pyo3(signature = (toml, seed = None))]
    fn synthetic(toml: &str, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config(toml, seed)?;
        let (spec, gt) = cli::ground_truth(&cfg).map_err(err)?;
        let source = SyntheticSource::new(&spec, gt.dictionary).map_err(err)?;
        let inner = training::Trainer::new(cfg.train_for_dim(spec.dim).map_err(err)?, spec.dim).map_err(err)?;
        Ok(Self { inner, source: Box::new(source) })
    }

    /// Train on minibatches drawn from the given rows.
    #[staticmethod]
    #[pyo3(signature = (toml, rows, seed = None))]
    fn on_rows(toml: &str, rows: Vec<Vec<f64>>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config(toml, seed)?;
        let data = matrix(rows)?;
        let dim = data.cols();
        let source = RowSource::new(data).map_err(err)?;
        let inner = training::Trainer::new(cfg.train_for_dim(dim).map_err(err)?, dim).map_err(err)?;
        Ok(Self { inner, source: Box::new(source) })
    }

    /// Resume from a checkpoint, drawing fresh synthetic samples.
    #[staticmethod]
    #[pyo3(signature = (path, toml, seed = None))]
    fn resume_synthetic(path: PathBuf, toml: &str, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config(toml, seed)?;
        let (spec, gt) = cli::ground_truth(&cfg).map_err(err)?;
        let source = SyntheticSource::new(&spec, gt.dictionary).map_err(err)?;
        let inner = training::Trainer::from_checkpoint(training::load_checkpoint(&path).map_err(err)?);
        Ok(Self { inner, source: Box::new(source) })
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    /// One optimizer step; returns its loss record.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let rec = self.inner.step(self.source.as_mut()).map_err(err)?;
        to_py(py, &rec)
    }

    /// Run until `until` (default: the configured step count).
    #[pyo3(signature = (until = None))]
    fn run(&mut self, until: Option<usize>) -> PyResult<()> {
        self.inner.run(self.source.as_mut(), until).map_err(err)
    }

    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py::<Vec<StepRecord>>(py, &self.inner.history)
    }

    fn model(&self) -> PyModel {
        PyModel { inner: self.inner.model.clone() }
    }

    /// Atomically write a resumable checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&path, &self.inner.checkpoint()).map_err(err)
    }
}

/// Names of the bundled presets.
#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    cli::config::preset_names()
}

/// TOML text of a bundled preset.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    RunConfig::preset(name).and_then(|c| c.to_toml()).map_err(err)
}

/// Samples from the configured hierarchical generator: returns
/// `(inputs, codes, atoms)` with atoms as an `m x p` list of rows.
#[pyfunction]
#[pyo3(signature = (toml, n, seed = None, stream = 0))]
fn generate(toml: &str, n: usize, seed: Option<u64>, stream: u64) -> PyResult<(Rows, Rows, Rows)> {
    let cfg = config(toml, seed)?;
    let (spec, gt) = cli::ground_truth(&cfg).map_err(err)?;
    let batch = sample_batch(&spec, &gt.dictionary, n, &mut RngStream::new(cfg.seed, stream)).map_err(err)?;
    Ok((rows_of(&batch.inputs), rows_of(&batch.codes), rows_of(gt.dictionary.atoms())))
}

/// Write a dataset into `out_dir`, as the `gen` subcommand does.
#[pyfunction]
#[pyo3(signature = (toml, out_dir, seed = None))]
fn gen(py: Python<'_>, toml: &str, out_dir: PathBuf, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let cfg = config(toml, seed)?;
    let manifest = py.detach(|| cli::cmd_gen(&cfg, &out_dir)).map_err(err)?;
    to_py(py, &manifest)
}

/// Train a model in `out_dir`, as the `train` subcommand does.
#[pyfunction]
#[pyo3(signature = (toml, out_dir, seed = None, resume = false))]
fn train(py: Python<'_>, toml: &str, out_dir: PathBuf, seed: Option<u64>, resume: bool) -> PyResult<Py<PyAny>> {
    let cfg = config(toml, seed)?;
    let manifest = py.detach(|| cli::cmd_train(&cfg, &out_dir, resume)).map_err(err)?;
    to_py(py, &manifest)
}

/// Evaluate the checkpoint in `out_dir`, as the `eval` subcommand does.
#[pyfunction]
#[pyo3(signature = (toml, out_dir, seed = None, checkpoint = None))]
fn evaluate(
    py: Python<'_>,
    toml: &str,
    out_dir: PathBuf,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = config(toml, seed)?;
    let report = py.detach(|| cli::cmd_eval(&cfg, &out_dir, checkpoint.as_deref())).map_err(err)?;
    to_py(py, &report)
}

/// Run a sweep in `out_dir`; `mode` is "inference-k" or "pareto". Returns
/// the path of the CSV written.
#[pyfunction]
#[pyo3(signature = (toml, out_dir, mode = None, seed = None))]
fn sweep(py: Python<'_>, toml: &str, out_dir: PathBuf, mode: Option<&str>, seed: Option<u64>) -> PyResult<PathBuf> {
    let cfg = config(toml, seed)?;
    let mode = match mode {
        None => None,
        Some("inference-k") => Some(SweepMode::InferenceK),
        Some("pareto") => Some(SweepMode::Pareto),
        Some(other) => return Err(PyValueError::new_err(format!("unknown sweep mode {other:?}"))),
    };
    py.detach(|| cli::cmd_sweep(&cfg, &out_dir, None, mode)).map_err(err)
}

/// Babel function of order `r` for unit-norm atoms (columns of `atoms`).
#[pyfunction]
fn babel(atoms: Vec<Vec<f64>>, r: usize) -> PyResult<f64> {
    let d = Dictionary::normalized(matrix(atoms)?).map_err(err)?;
    dictionary::babel(&d, r).map_err(err)
}

/// Exponential of the spectral entropy of a code matrix.
#[pyfunction]
fn effective_rank(codes: Vec<Vec<f64>>) -> PyResult<f64> {
    analysis::effective_rank(&matrix(codes)?).map_err(err)
}

/// Per-latent image share of activation energy. Labels are 0 for text and
/// 1 for image rows.
#[pyfunction]
#[pyo3(signature = (codes, labels, text_energy_scale = None))]
fn modality_scores(codes: Vec<Vec<f64>>, labels: Vec<u8>, text_energy_scale: Option<f64>) -> PyResult<Vec<f64>> {
    let codes = CodeMatrix::new(matrix(codes)?, labels_of(Some(labels))?).map_err(err)?;
    Ok(analysis::modality_score(&codes, text_energy_scale).map_err(err)?.scores)
}

/// Read an embedding file: returns `(rows, labels)`, labels `None` when no
/// sidecar exists.
#[pyfunction]
fn read_embeddings(path: PathBuf) -> PyResult<(Rows, Option<Vec<u32>>)> {
    let file = cli::read_embeddings(&path).map_err(err)?;
    let labels = file.labels.map(|l| l.into_iter().map(|m| u32::from(m == Modality::Image)).collect());
    Ok((rows_of(&file.data), labels))
}

/// Write an embedding file with 32- or 64-bit scalars and an optional
/// labels sidecar.
#[pyfunction]
#[pyo3(signature = (path, rows, labels = None, bits = 32))]
fn write_embeddings(path: PathBuf, rows: Vec<Vec<f64>>, labels: Option<Vec<u8>>, bits: u32) -> PyResult<()> {
    let width = match bits {
        32 => ScalarWidth::F32,
        64 => ScalarWidth::F64,
        other => return Err(PyValueError::new_err(format!("bits must be 32 or 64, got {other}"))),
    };
    let file = EmbeddingFile { data: matrix(rows)?, width, labels: labels_of(labels)? };
    cli::write_embeddings(Path::new(&path), &file).map_err(err)
}

/// Raw bytes of an embedding payload, without writing a file.
#[pyfunction]
#[pyo3(signature = (rows, bits = 32))]
fn encode_embeddings(rows: Vec<Vec<f64>>, bits: u32) -> PyResult<Vec<u8>> {
    let width = if bits == 64 { ScalarWidth::F64 } else { ScalarWidth::F32 };
    Ok(embfile::encode_embeddings(&matrix(rows)?, width))
}

#[pymodule]
fn mpsae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MpsaeError", m.py().get_type::<MpsaeError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(babel, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(modality_scores, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(encode_embeddings, m)?)?;
    Ok(())
}
