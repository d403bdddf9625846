//! Python bindings: Raw frames, HDR images, the reconstruction model, merging,
//! metrics, training and gradient checks.
//!
//! Images cross the boundary as flat row-major lists with an explicit shape.
//! Configs and reports cross as plain dicts, converted through JSON.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use rawhdr::camera_sim::{bracket, render_scene_with, CameraProfile, ExposureStack, SceneOptions};
use rawhdr::formats;
use rawhdr::hdr_merge;
use rawhdr::losses::{log_l2, LOG_EPS};
use rawhdr::masks::hard_masks;
use rawhdr::metrics;
use rawhdr::net::{forward, NetConfig, NetParams};
use rawhdr::raw_model::{self, pack};
use rawhdr::training::{self, TrainConfig, TrainingPair};
use rawhdr::Tensor;

fn py_err(e: rawhdr::Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        "io" => PyIOError::new_err(msg),
        "numerical" => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for rawhdr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `None` yields the default value.
fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A Bayer RGGB mosaic of integer codes.
#[pyclass(name = "RawMosaic", module = "rawhdr_py", from_py_object)]
#[derive(Clone)]
pub struct PyRawMosaic {
    inner: raw_model::RawMosaic,
}

#[pymethods]
impl PyRawMosaic {
    #[new]
    #[pyo3(signature = (height, width, data, black_level=512, white_level=16383, bit_depth=14, exposure_ev=0.0))]
    fn new(
        height: usize,
        width: usize,
        data: Vec<u16>,
        black_level: u32,
        white_level: u32,
        bit_depth: u32,
        exposure_ev: f64,
    ) -> PyResult<Self> {
        let inner = raw_model::RawMosaic::new(height, width, data, black_level, white_level, bit_depth, exposure_ev).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: formats::read_raw(&path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_raw(&path, &self.inner).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    #[getter]
    fn exposure_ev(&self) -> f64 {
        self.inner.exposure_ev
    }

    #[getter]
    fn black_level(&self) -> u32 {
        self.inner.black_level
    }

    #[getter]
    fn white_level(&self) -> u32 {
        self.inner.white_level
    }

    #[getter]
    fn bit_depth(&self) -> u32 {
        self.inner.bit_depth
    }

    fn data(&self) -> Vec<u16> {
        self.inner.data().to_vec()
    }

    /// Normalized `(h/2, w/2, 4)` packed image in channel order R, G1, B, G2.
    fn pack(&self) -> PyResult<PyHdrImage> {
        let packed = pack(&self.inner).py()?;
        Ok(PyHdrImage {
            inner: raw_model::HdrImage::new(packed.into_tensor()).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "RawMosaic({}x{}, ev={}, bits={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.exposure_ev,
            self.inner.bit_depth
        )
    }
}

/// Non-negative `(h, w, 4)` radiance in packed channel order.
#[pyclass(name = "HdrImage", module = "rawhdr_py", from_py_object)]
#[derive(Clone)]
pub struct PyHdrImage {
    inner: raw_model::HdrImage,
}

#[pymethods]
impl PyHdrImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        let t = Tensor::new(&[height, width, 4], data).py()?;
        Ok(Self {
            inner: raw_model::HdrImage::new(t).py()?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: formats::read_hdr(&path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_hdr(&path, &self.inner).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [h, w, c] = self.inner.shape();
        (h, w, c)
    }

    fn data(&self) -> Vec<f64> {
        self.inner.tensor().data().to_vec()
    }

    fn max(&self) -> f64 {
        self.inner.tensor().max()
    }

    fn __repr__(&self) -> String {
        let [h, w, c] = self.inner.shape();
        format!("HdrImage({h}x{w}x{c})")
    }
}

/// Network configuration and parameters.
#[pyclass(name = "Model", module = "rawhdr_py", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    params: NetParams,
    config: NetConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized weights; `config` is a dict of config fields.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let config: NetConfig = from_py(config)?;
        let params = training::init_params(&config, seed).py()?;
        Ok(Self { params, config })
    }

    /// Load a checkpoint and its config sidecar.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = formats::read_checkpoint(&path).py()?;
        Ok(Self { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::write_checkpoint(&path, &self.params, &self.config).py()
    }

    fn infer(&self, raw: &PyRawMosaic) -> PyResult<PyHdrImage> {
        Ok(PyHdrImage {
            inner: forward(&raw.inner, &self.params, &self.config).py()?,
        })
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    #[getter]
    fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.params == other.params && self.config == other.config
    }
}

/// Render one synthetic scene and capture it at each exposure value.
#[pyfunction]
#[pyo3(signature = (seed, height, width, evs, dynamic_range_bits=20, center_log2=0.0, profile=None))]
fn capture_bracket(
    seed: u64,
    height: usize,
    width: usize,
    evs: Vec<f64>,
    dynamic_range_bits: u32,
    center_log2: f64,
    profile: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<PyRawMosaic>> {
    let profile: CameraProfile = from_py(profile)?;
    let opts = SceneOptions {
        center_log2,
        ..SceneOptions::new(dynamic_range_bits)
    };
    let scene = render_scene_with(seed, (height, width), &opts).py()?;
    let stack = bracket(&scene, &profile, &evs, seed).py()?;
    Ok(stack.mosaics.iter().map(|m| PyRawMosaic { inner: m.clone() }).collect())
}

fn stack_of(frames: &[PyRawMosaic]) -> PyResult<ExposureStack> {
    ExposureStack::new(frames.iter().map(|f| f.inner.clone()).collect()).py()
}

/// Merge a bracket into radiance at the 0 EV reference.
#[pyfunction]
fn merge(frames: Vec<PyRawMosaic>) -> PyResult<PyHdrImage> {
    Ok(PyHdrImage {
        inner: hdr_merge::merge(&stack_of(&frames)?).py()?,
    })
}

/// Fraction of packed pixels with at least one usable exposure.
#[pyfunction]
fn coverage(frames: Vec<PyRawMosaic>) -> PyResult<f64> {
    hdr_merge::coverage_report(&stack_of(&frames)?).py()
}

/// Thresholded `(over, under, well)` masks, each a flat `(h/2, w/2)` list.
#[pyfunction]
#[pyo3(signature = (raw, lo=rawhdr::masks::HARD_LO, hi=rawhdr::masks::HARD_HI))]
fn masks(raw: &PyRawMosaic, lo: f64, hi: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let m = hard_masks(&pack(&raw.inner).py()?, lo, hi).py()?;
    Ok((m.over.into_data(), m.under.into_data(), m.well.into_data()))
}

#[pyfunction]
#[pyo3(signature = (pred, reference, eps=LOG_EPS))]
fn log_l2_loss(pred: &PyHdrImage, reference: &PyHdrImage, eps: f64) -> PyResult<f64> {
    log_l2(&pred.inner, &reference.inner, eps).py()
}

/// PSNR after μ-law tone mapping, peak taken from the reference.
#[pyfunction]
#[pyo3(signature = (pred, reference, mu=metrics::DEFAULT_MU))]
fn psnr_mu(pred: &PyHdrImage, reference: &PyHdrImage, mu: f64) -> PyResult<f64> {
    let r = reference.inner.tensor();
    metrics::psnr_mu(pred.inner.tensor(), r, mu, metrics::reference_peak(r)).py()
}

/// Every metric as a dict.
#[pyfunction]
#[pyo3(signature = (pred, reference, mu=metrics::DEFAULT_MU, scene_id="scene"))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: &PyHdrImage,
    reference: &PyHdrImage,
    mu: f64,
    scene_id: &str,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::evaluate(scene_id, &pred.inner, &reference.inner, mu).py()?)
}

/// `(raw, hdr)` pairs of synthetic 0 EV frames and merged targets.
#[pyfunction]
#[pyo3(signature = (count, height, width, seed=0))]
fn synthetic_pairs(count: usize, height: usize, width: usize, seed: u64) -> PyResult<Vec<(PyRawMosaic, PyHdrImage)>> {
    let pairs = training::synthetic_pairs(count, (height, width), seed).py()?;
    Ok(pairs
        .into_iter()
        .map(|p| (PyRawMosaic { inner: p.raw }, PyHdrImage { inner: p.hdr }))
        .collect())
}

/// Train from scratch; returns the model and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (pairs, net_config=None, train_config=None))]
fn train<'py>(
    py: Python<'py>,
    pairs: Vec<(PyRawMosaic, PyHdrImage)>,
    net_config: Option<&Bound<'py, PyAny>>,
    train_config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let config: NetConfig = from_py(net_config)?;
    let cfg: TrainConfig = from_py(train_config)?;
    let dataset = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (raw, hdr))| TrainingPair::new(format!("pair{i:04}"), raw.inner, hdr.inner))
        .collect::<rawhdr::Result<Vec<_>>>()
        .py()?;
    let (params, history) = py.detach(|| training::train(&dataset, &config, &cfg)).py()?;
    Ok((PyModel { params, config }, to_py(py, &history)?))
}

/// Largest relative error between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (op, seed=0))]
fn grad_check(op: &str, seed: u64) -> PyResult<f64> {
    Ok(training::grad_check(op, seed).py()?.max_rel_error)
}

#[pymodule]
pub fn rawhdr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("GRAD_OPS", training::GRAD_OPS.to_vec())?;
    m.add_class::<PyRawMosaic>()?;
    m.add_class::<PyHdrImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(capture_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(masks, m)?)?;
    m.add_function(wrap_pyfunction!(log_l2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_mu, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
