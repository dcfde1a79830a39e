//! Python bindings: configuration, data generation, both training stages,
//! evaluation, feature extraction and the gradient check.

use std::path::PathBuf;

use fewshot_core::classifier::classify_with;
use fewshot_core::error::Error;
use fewshot_core::eval::aggregate;
use fewshot_core::gradcheck::{run_suite, GradCheckConfig};
use fewshot_core::model::FeatureBank;
use fewshot_core::pipeline;
use fewshot_core::trainer::TrainLog;
use fewshot_core::{SupportSet, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::Shape { .. } | Error::InvalidTensor(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) | Error::Format(_) | Error::UnsupportedVersion { .. } | Error::Json(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Run configuration. Keyword arguments override defaults:
/// `RunConfig(seed=3, n_tasks=200)`.
#[pyclass(module = "fewshot", name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: fewshot_core::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = fewshot_core::RunConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let value = if let Ok(list) = v.cast::<PyList>() {
                    list.iter()
                        .map(|x| x.str().map(|s| s.to_string()))
                        .collect::<PyResult<Vec<_>>>()?
                        .join(",")
                } else if let Ok(b) = v.extract::<bool>() {
                    b.to_string()
                } else {
                    v.str()?.to_string()
                };
                inner.set(&k.extract::<String>()?, &value).map_err(py_err)?;
            }
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fewshot_core::RunConfig::from_text(text).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn to_dict(&self) -> Vec<(String, String)> {
        self.inner.to_map().into_iter().collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

#[pyclass(module = "fewshot", name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: fewshot_core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generates the synthetic dataset described by `config`.
    #[staticmethod]
    fn generate(py: Python<'_>, config: &PyRunConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let inner = py.detach(move || pipeline::make_dataset(&cfg)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: fewshot_core::Dataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn n_categories(&self) -> usize {
        self.inner.n_categories()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn base(&self) -> Vec<usize> {
        self.inner.split.base.clone()
    }

    #[getter]
    fn val_novel(&self) -> Vec<usize> {
        self.inner.split.val_novel.clone()
    }

    #[getter]
    fn test_novel(&self) -> Vec<usize> {
        self.inner.split.test_novel.clone()
    }

    fn count(&self, category: usize) -> PyResult<usize> {
        self.check(category)?;
        Ok(self.inner.count(category))
    }

    /// Raw inputs of one category, one list per example.
    fn examples(&self, category: usize) -> PyResult<Vec<Vec<f64>>> {
        self.check(category)?;
        Ok(rows(self.inner.examples(category)))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(base={}, val={}, test={}, input_dim={})",
            self.inner.split.base.len(),
            self.inner.split.val_novel.len(),
            self.inner.split.test_novel.len(),
            self.inner.input_dim()
        )
    }
}

impl PyDataset {
    fn check(&self, category: usize) -> PyResult<()> {
        if category >= self.inner.n_categories() {
            return Err(PyValueError::new_err(format!(
                "category {category} out of range (0..{})",
                self.inner.n_categories()
            )));
        }
        Ok(())
    }
}

/// A trained model with the configuration it was trained under.
#[pyclass(module = "fewshot", name = "Checkpoint", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: fewshot_core::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: fewshot_core::Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[getter]
    fn stage(&self) -> u32 {
        self.inner.stage
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.model.head().to_string()
    }

    #[getter]
    fn generator(&self) -> String {
        self.inner.model.generator.mode.to_string()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.model.classifier.tau.value.item()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.model.feature_dim()
    }

    #[getter]
    fn config(&self) -> PyResult<PyRunConfig> {
        Ok(PyRunConfig {
            inner: fewshot_core::RunConfig::from_text(&self.inner.run_config).map_err(py_err)?,
        })
    }

    /// FNV-1a checksum of the extractor parameters.
    fn extractor_checksum(&self) -> u64 {
        self.inner.model.extractor_checksum()
    }

    fn base_weights(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.model.classifier.base_weights.value)
    }

    /// Features of raw inputs, one list per row.
    fn extract(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(&inputs)?;
        Ok(rows(&self.inner.model.extractor.extract_batch(&x).map_err(py_err)?))
    }

    /// Features of every example of one dataset category.
    fn features(&self, dataset: &PyDataset, category: usize) -> PyResult<Vec<Vec<f64>>> {
        dataset.check(category)?;
        let bank = FeatureBank::compute(&self.inner.model.extractor, &dataset.inner, &[category]).map_err(py_err)?;
        Ok(rows(bank.category(category)))
    }

    /// Generated classification weight for a few support features.
    fn generate_weight(&self, support: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let s = SupportSet::from_features(&support, 0).map_err(py_err)?;
        let base = &self.inner.model.classifier.base_weights.value;
        Ok(self
            .inner
            .model
            .generator
            .generate_weight(&s, base, &[])
            .map_err(py_err)?
            .into_data())
    }

    /// Probabilities over the base categories followed by `novel_weights`.
    #[pyo3(signature = (features, novel_weights = None))]
    fn classify(&self, features: Vec<Vec<f64>>, novel_weights: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let model = &self.inner.model;
        let mut w = rows(&model.classifier.base_weights.value);
        w.extend(novel_weights.unwrap_or_default());
        let p = classify_with(
            &matrix(&features)?,
            &matrix(&w)?,
            model.head(),
            model.classifier.tau.value.item(),
        )
        .map_err(py_err)?;
        Ok(rows(&p))
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(stage={}, head={}, generator={})",
            self.inner.stage,
            self.head(),
            self.generator()
        )
    }
}

fn log_to_py<'py>(py: Python<'py>, log: &TrainLog) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for line in log.to_jsonl().map_err(py_err)?.lines() {
        list.append(json_to_py(py, line)?)?;
    }
    Ok(list)
}

/// Stage 1 from scratch. Returns `(checkpoint, epoch_log)`.
#[pyfunction]
fn train_stage1<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    dataset: &PyDataset,
) -> PyResult<(PyCheckpoint, Bound<'py, PyList>)> {
    let (ck, log) = py
        .detach(|| pipeline::run_stage1(&config.inner, &dataset.inner))
        .map_err(py_err)?;
    Ok((PyCheckpoint { inner: ck }, log_to_py(py, &log)?))
}

/// Stage 2 on top of a stage-1 checkpoint. Returns `(checkpoint, epoch_log)`.
#[pyfunction]
fn train_stage2<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    dataset: &PyDataset,
    stage1: &PyCheckpoint,
) -> PyResult<(PyCheckpoint, Bound<'py, PyList>)> {
    let (ck, log) = py
        .detach(|| pipeline::run_stage2(&config.inner, &dataset.inner, &stage1.inner))
        .map_err(py_err)?;
    Ok((PyCheckpoint { inner: ck }, log_to_py(py, &log)?))
}

/// Metrics report as a dict; accuracies are fractions.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    dataset: &PyDataset,
    checkpoint: &PyCheckpoint,
) -> PyResult<Bound<'py, PyAny>> {
    let json = py
        .detach(|| {
            pipeline::run_eval(&config.inner, &dataset.inner, &checkpoint.inner.model).and_then(|r| r.to_json())
        })
        .map_err(py_err)?;
    json_to_py(py, &json)
}

/// Finite-difference check of every registered gradient; one dict per check.
#[pyfunction]
#[pyo3(signature = (instances = 20, only = None, seed = 0))]
fn grad_check<'py>(
    py: Python<'py>,
    instances: usize,
    only: Option<Vec<String>>,
    seed: u64,
) -> PyResult<Bound<'py, PyList>> {
    let cfg = GradCheckConfig {
        instances,
        seed,
        ..Default::default()
    };
    let report = run_suite(&cfg, &only.unwrap_or_default()).map_err(py_err)?;
    let list = PyList::empty(py);
    for r in report.results {
        let d = PyDict::new(py);
        d.set_item("name", r.name)?;
        d.set_item("instances", r.instances)?;
        d.set_item("max_error", r.max_error)?;
        d.set_item("passed", r.passed)?;
        list.append(d)?;
    }
    Ok(list)
}

/// `(mean, ci95)` of per-task accuracies, or `None` for an empty list.
#[pyfunction]
fn mean_ci95(values: Vec<f64>) -> Option<(f64, f64)> {
    aggregate(&values).map(|s| (s.mean, s.ci95))
}

#[pymodule]
pub fn fewshot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ci95, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
