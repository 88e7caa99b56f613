//! Python bindings for the `spectra` engine.
//!
//! Windows cross the boundary as nested lists of shape `(T, C)`; batches as
//! `(B, T, C)`.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use spectra::config::RunConfig;
use spectra::costs::count_costs;
use spectra::format::{load_model, peek_version, save_model, VERSION_QUANT};
use spectra::model::{build_model, ModelParams};
use spectra::quant::{load_quantized, QuantizedModel};
use spectra::spectral::{stft_direct, StftPlan};
use spectra::{SpectraError, Tensor};

create_exception!(spectra_py, SpectraPyError, PyException);

fn err(e: SpectraError) -> PyErr {
    SpectraPyError::new_err(e.to_string())
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn parse_config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::parse(t).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

/// Per-layer parameter and MAC counts as a JSON string.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn count(config: Option<&str>) -> PyResult<String> {
    let rc = parse_config(config)?;
    rc.model.validate().map_err(err)?;
    let report = count_costs(&rc.model);
    let mut v = serde_json::to_value(&report).expect("serializable");
    v["total_macs"] = report.total_macs().into();
    Ok(v.to_string())
}

/// STFT magnitudes `(L, F, C)` of a `(T, C)` window, flattened row-major.
#[pyfunction]
fn stft(window: Vec<Vec<f64>>, n_fft: usize, hop: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let x = to_tensor(window)?;
    let plan = StftPlan::new(n_fft, hop, x.shape()[0]).map_err(err)?;
    let mags = stft_direct(&x, &plan).map_err(err)?.mags;
    Ok((mags.shape().to_vec(), mags.into_data()))
}

enum Inner {
    Float(ModelParams),
    Quant(Box<QuantizedModel>),
}

#[pyclass(module = "spectra_py")]
struct Model {
    inner: Inner,
}

impl Model {
    fn base(&self) -> &ModelParams {
        match &self.inner {
            Inner::Float(m) => m,
            Inner::Quant(q) => &q.base,
        }
    }
}

#[pymethods]
impl Model {
    /// Fresh model from `key=value` configuration text (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let rc = parse_config(config)?;
        Ok(Model {
            inner: Inner::Float(build_model(&rc.model).map_err(err)?),
        })
    }

    /// Loads a float or quantized SPCT file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = if peek_version(path).map_err(err)? == VERSION_QUANT {
            Inner::Quant(Box::new(load_quantized(path).map_err(err)?))
        } else {
            Inner::Float(load_model(path).map_err(err)?)
        };
        Ok(Model { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match &self.inner {
            Inner::Float(m) => save_model(m, path).map_err(err),
            Inner::Quant(q) => spectra::quant::save_quantized(q, path).map_err(err),
        }
    }

    #[getter]
    fn quantized(&self) -> bool {
        matches!(self.inner, Inner::Quant(_))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.base().param_count()
    }

    /// The model configuration as `key=value` text.
    #[getter]
    fn config(&self) -> String {
        RunConfig {
            model: self.base().config.clone(),
            ..Default::default()
        }
        .render()
    }

    /// Class probabilities of one already-normalized `(T, C)` window.
    fn predict(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_tensor(window)?;
        match &self.inner {
            Inner::Float(m) => m.predict_window(&x),
            Inner::Quant(q) => q.predict_window(&x),
        }
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = &self.base().config;
        format!(
            "Model(channels={}, classes={}, params={}, quantized={})",
            c.channels,
            c.classes,
            self.base().param_count(),
            self.quantized()
        )
    }
}

#[pymodule]
fn spectra_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SpectraError", m.py().get_type::<SpectraPyError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    Ok(())
}
