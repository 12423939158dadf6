use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slimadam_core::model::CensusEntry;
use slimadam_core::rules::savings_report;
use slimadam_core::snr::snr_k_with;
use slimadam_core::tensor::{broadcast_along, mean_along, VarianceEstimator};
use slimadam_core::{canonical_rules, harness, Axes, Census, RuleSet, TrainConfig};

fn err(e: slimadam_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn axes(k: &str) -> PyResult<Axes> {
    k.parse().map_err(err)
}

#[pyclass(name = "Tensor", module = "slimadam", frozen)]
struct PyTensor(slimadam_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        slimadam_core::Tensor::new(&shape, data)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    fn scale(&self, c: f64) -> Self {
        Self(self.0.scale(c))
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// Mean over the axes named by `k`, keeping reduced axes as length 1.
    fn mean_along(&self, k: &str) -> PyResult<Self> {
        mean_along(&self.0, axes(k)?).map(Self).map_err(err)
    }

    /// Expands a reduced tensor back to `shape` along `k`.
    fn broadcast_along(&self, k: &str, shape: Vec<usize>) -> PyResult<Self> {
        broadcast_along(&self.0, axes(k)?, &shape)
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Signal-to-noise ratio of `v` along `k` with population variance.
#[pyfunction]
#[pyo3(signature = (v, k, eps_snr = slimadam_core::snr::DEFAULT_EPS_SNR))]
fn snr_k(v: &PyTensor, k: &str, eps_snr: f64) -> PyResult<f64> {
    snr_k_with(&v.0, axes(k)?, eps_snr, VarianceEstimator::Population).map_err(err)
}

#[pyclass(name = "Schedule", module = "slimadam", frozen)]
struct PySchedule(slimadam_core::Schedule);

#[pymethods]
impl PySchedule {
    #[new]
    fn new(peak_lr: f64, warmup: u64, total: u64) -> PyResult<Self> {
        slimadam_core::Schedule::new(peak_lr, warmup, total)
            .map(Self)
            .map_err(err)
    }

    fn lr_at(&self, t: u64) -> PyResult<f64> {
        self.0.lr_at(t).map_err(err)
    }

    #[getter]
    fn min_lr(&self) -> f64 {
        self.0.min_lr()
    }
}

fn census_of(config: Option<&str>) -> PyResult<Census> {
    match config {
        None => Ok(Census::gpt_small()),
        Some(text) => {
            let cfg = TrainConfig::from_toml_str(text).map_err(err)?;
            Census::for_spec(&cfg.model_spec()).map_err(err)
        }
    }
}

fn entry_dict<'py>(py: Python<'py>, e: &CensusEntry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &e.name)?;
    d.set_item("layer_type", e.layer_type.to_string())?;
    d.set_item("depth", e.depth)?;
    d.set_item("shape", e.shape.clone())?;
    d.set_item("tied_to", e.tied_to.clone())?;
    Ok(d)
}

/// Parameter census of the model described by a TOML config, or of GPT-small
/// when no config is given.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn census<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let c = census_of(config)?;
    c.entries.iter().map(|e| entry_dict(py, e)).collect()
}

/// Canonical compression rules as rules-file text.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn canonical(config: Option<&str>) -> PyResult<String> {
    Ok(canonical_rules(&census_of(config)?).to_text())
}

/// Fraction of second-moment entries removed by `rules`.
#[pyfunction]
#[pyo3(signature = (rules, config = None))]
fn savings(rules: &str, config: Option<&str>) -> PyResult<f64> {
    let rules = RuleSet::from_text(rules).map_err(err)?;
    Ok(savings_report(&census_of(config)?, &rules)
        .map_err(err)?
        .fraction)
}

/// Normalizes a TOML config, filling in every default.
#[pyfunction]
fn normalize_config(config: &str) -> PyResult<String> {
    TrainConfig::from_toml_str(config)
        .and_then(|c| c.to_toml())
        .map_err(err)
}

/// Trains the model described by a TOML config and returns a summary.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_toml_str(config).map_err(err)?;
    let report = py.detach(|| harness::train(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("steps_run", report.steps_run)?;
    d.set_item("initial_loss", report.initial_loss)?;
    d.set_item("final_loss", report.final_loss)?;
    d.set_item("final_eval_loss", report.final_eval_loss)?;
    d.set_item("best_eval_loss", report.best_eval_loss)?;
    d.set_item("diverged", report.diverged)?;
    d.set_item("divergence", report.divergence.clone())?;
    d.set_item("savings_fraction", report.savings_fraction)?;
    d.set_item(
        "losses",
        report.losses.iter().map(|r| r.loss).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

#[pymodule]
fn slimadam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(snr_k, m)?)?;
    m.add_function(wrap_pyfunction!(census, m)?)?;
    m.add_function(wrap_pyfunction!(canonical, m)?)?;
    m.add_function(wrap_pyfunction!(savings, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
