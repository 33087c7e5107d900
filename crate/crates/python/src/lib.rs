//! Python bindings. Tensors cross the boundary as 64-bit [`PyTensor`]s; the
//! model runs in whatever precision its config names.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pcanet::coattention::{coattend as coattend_op, CoAttentionOptions, FeaturePair};
use pcanet::config::{Precision, TrainConfig};
use pcanet::data::{load_image_folder, Dataset};
use pcanet::erase::{attention_map as attention_map_op, drop_mask as drop_mask_op, AttentionMap, AttentionReduce};
use pcanet::head::bilinear_feature;
use pcanet::train::{
    checkpoint_precision, evaluate, fit, load_checkpoint, predict, save_checkpoint, train_epoch, EpochRecord,
    TrainData, TrainState,
};
use pcanet::{Error, Scalar, Tape, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension { .. } | Error::Shape { .. } | Error::Label { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Dense row-major float64 tensor.
#[pyclass(name = "Tensor", module = "pcanet", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f64>,
}

impl From<Tensor<f64>> for PyTensor {
    fn from(inner: Tensor<f64>) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor::from_vec(&shape, data).map_err(err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor::zeros(&shape).into()
    }

    #[staticmethod]
    fn eye(n: usize) -> Self {
        Tensor::eye(n).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.reshape(&shape).map_err(err)?.into())
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Runs a one-output tape computation on constant inputs.
fn on_tape(
    inputs: &[&PyTensor],
    f: impl FnOnce(&mut Tape<f64>, &[pcanet::Var]) -> pcanet::Result<pcanet::Var>,
) -> PyResult<PyTensor> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.inner.clone())).collect();
    let out = f(&mut tape, &vars).map_err(err)?;
    Ok(tape.value(out).clone().into())
}

#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    on_tape(&[a, b], |t, v| t.matmul(v[0], v[1]))
}

#[pyfunction]
fn softmax_rows(x: &PyTensor) -> PyResult<PyTensor> {
    on_tape(&[x], |t, v| t.softmax_rows(v[0]))
}

#[pyfunction]
#[pyo3(signature = (input, kernels, stride = 1, padding = 0))]
fn conv2d(input: &PyTensor, kernels: &PyTensor, stride: usize, padding: usize) -> PyResult<PyTensor> {
    on_tape(&[input, kernels], |t, v| t.conv2d(v[0], v[1], stride, padding))
}

/// Row-softmax of `-F1 F2^T` for two `c x h x w` maps.
#[pyfunction]
fn channel_weights(f1: &PyTensor, f2: &PyTensor) -> PyResult<PyTensor> {
    let pair = FeaturePair::new(f1.inner.clone(), f2.inner.clone(), 0).map_err(err)?;
    Ok(pair.channel_weights().map_err(err)?.w.into())
}

/// Returns `(fw1, fw2, weights)`.
#[pyfunction]
#[pyo3(signature = (f1, f2, transpose_for_second = false))]
fn coattend(f1: &PyTensor, f2: &PyTensor, transpose_for_second: bool) -> PyResult<(PyTensor, PyTensor, PyTensor)> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(f1.inner.clone()), tape.constant(f2.inner.clone()));
    let out = coattend_op(&mut tape, a, b, CoAttentionOptions { transpose_for_second }).map_err(err)?;
    let get = |v| PyTensor::from(tape.value(v).clone());
    Ok((get(out.fw1), get(out.fw2), get(out.weights)))
}

fn parse_reduce(name: &str) -> PyResult<AttentionReduce> {
    match name {
        "argmax_gap" => Ok(AttentionReduce::ArgmaxGap),
        "pixel_max" => Ok(AttentionReduce::PixelMax),
        other => Err(PyValueError::new_err(format!(
            "unknown reduction {other:?}, expected argmax_gap or pixel_max"
        ))),
    }
}

/// Returns the normalized `s x s` map and the channel it came from.
#[pyfunction]
#[pyo3(signature = (fw, image_size, reduce = "argmax_gap"))]
fn attention_map(fw: &PyTensor, image_size: usize, reduce: &str) -> PyResult<(PyTensor, usize)> {
    let a = attention_map_op(&fw.inner, image_size, parse_reduce(reduce)?).map_err(err)?;
    Ok((a.a.into(), a.source_channel))
}

/// Binary keep mask: 0 where the normalized map exceeds `theta`.
#[pyfunction]
fn drop_mask(attention: &PyTensor, theta: f64) -> PyResult<PyTensor> {
    let a = AttentionMap {
        a: attention.inner.clone(),
        source_channel: 0,
    };
    Ok(drop_mask_op(&a, theta).map_err(err)?.m.into())
}

#[pyfunction]
fn erase(image: &PyTensor, mask: &PyTensor) -> PyResult<PyTensor> {
    let m = pcanet::erase::DropMask {
        m: mask.inner.clone(),
        theta_used: f64::NAN,
    };
    Ok(pcanet::erase::erase(&image.inner, &m).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (f, normalize = true))]
fn bilinear_pool(f: &PyTensor, normalize: bool) -> PyResult<PyTensor> {
    Ok(bilinear_feature(&f.inner, normalize).map_err(err)?.v.into())
}

#[pyfunction]
fn lr_at(epoch: usize, config: &PyConfig) -> f64 {
    pcanet::train::lr_at(epoch, &config.inner)
}

/// Flat training configuration; keys match the JSON config file.
#[pyclass(name = "Config", module = "pcanet", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    /// `Config()` gives the desk defaults; keyword arguments override keys.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: TrainConfig::default(),
        };
        for (key, value) in overrides.unwrap_or_default() {
            cfg.set_value(&key, &value)?;
        }
        Ok(cfg)
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::preset(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// `set("epochs=3")`
    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.inner.set(assignment).map_err(err)
    }

    fn set_value(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let json = value.py().import("json")?.call_method1("dumps", (value,))?;
        self.inner.set(&format!("{key}={}", json.extract::<String>()?)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_json())
    }
}

/// Train and test images, already resized to the model input.
#[pyclass(name = "Data", module = "pcanet")]
pub struct PyData {
    inner: TrainData,
}

#[pymethods]
impl PyData {
    /// The synthetic dataset described by the config's data keys.
    #[staticmethod]
    fn synthetic(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: TrainData::synthetic(&config.inner).map_err(err)?,
        })
    }

    /// A directory holding `train/` and `test/` class folders.
    #[staticmethod]
    fn folder(root: PathBuf, input_size: usize) -> PyResult<Self> {
        let load = |split: &str| -> PyResult<Dataset> { load_image_folder(&root.join(split), input_size).map_err(err) };
        Ok(Self {
            inner: TrainData::new(&load("train")?, &load("test")?, input_size).map_err(err)?,
        })
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn test_labels(&self) -> Vec<usize> {
        self.inner.test.labels.clone()
    }
}

enum State {
    F32(TrainState<f32>),
    F64(TrainState<f64>),
}

macro_rules! with_state {
    ($s:expr, $st:ident => $body:expr) => {
        match $s {
            State::F32($st) => $body,
            State::F64($st) => $body,
        }
    };
}

fn record_dict(r: &EpochRecord) -> BTreeMap<&'static str, Option<f64>> {
    BTreeMap::from([
        ("epoch", Some(r.epoch as f64)),
        ("lr", Some(r.lr)),
        ("loss_total", Some(r.loss_total)),
        ("loss_ce_o", r.loss_ce_o),
        ("loss_ce_w", r.loss_ce_w),
        ("loss_ce_e", r.loss_ce_e),
        ("loss_center", r.loss_center),
        ("acc_train", Some(r.acc_train)),
        ("acc_test", Some(r.acc_test)),
    ])
}

/// Backbone, classifier, class centers and optimizer state.
#[pyclass(name = "Model", module = "pcanet")]
pub struct PyModel {
    state: State,
}

impl PyModel {
    fn from_state<T: Scalar>(state: TrainState<T>) -> Self
    where
        State: From<TrainState<T>>,
    {
        Self { state: state.into() }
    }
}

impl From<TrainState<f32>> for State {
    fn from(s: TrainState<f32>) -> Self {
        State::F32(s)
    }
}

impl From<TrainState<f64>> for State {
    fn from(s: TrainState<f64>) -> Self {
        State::F64(s)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig, class_names: Vec<String>) -> PyResult<Self> {
        let cfg = config.inner.clone();
        Ok(match cfg.precision {
            Precision::F32 => Self::from_state(TrainState::<f32>::new(cfg, class_names).map_err(err)?),
            Precision::F64 => Self::from_state(TrainState::<f64>::new(cfg, class_names).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(match checkpoint_precision(&path).map_err(err)? {
            Precision::F32 => Self::from_state(load_checkpoint::<f32>(&path).map_err(err)?),
            Precision::F64 => Self::from_state(load_checkpoint::<f64>(&path).map_err(err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        with_state!(&self.state, s => save_checkpoint(s, &path)).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        with_state!(&self.state, s => s.epoch)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: with_state!(&self.state, s => s.config.clone()),
        }
    }

    /// One epoch; returns its summary record.
    fn train_epoch(&mut self, data: &PyData) -> PyResult<BTreeMap<&'static str, Option<f64>>> {
        let r = with_state!(&mut self.state, s => train_epoch(s, &data.inner, None)).map_err(err)?;
        Ok(record_dict(&r))
    }

    /// Trains up to the configured epoch count.
    fn fit(&mut self, data: &PyData) -> PyResult<Vec<BTreeMap<&'static str, Option<f64>>>> {
        let rs = with_state!(&mut self.state, s => fit(s, &data.inner, None, |_| {})).map_err(err)?;
        Ok(rs.iter().map(record_dict).collect())
    }

    /// Top-1 accuracy on the test split.
    fn evaluate(&self, data: &PyData) -> PyResult<f64> {
        with_state!(&self.state, s => evaluate(s, &data.inner.test)).map_err(err)
    }

    /// Predicted class indices for the test split.
    fn predict(&self, data: &PyData) -> PyResult<Vec<usize>> {
        with_state!(&self.state, s => predict(s, &data.inner.test)).map_err(err)
    }
}

#[pymodule]
#[pyo3(name = "pcanet")]
fn pcanet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyData>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(channel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(coattend, m)?)?;
    m.add_function(wrap_pyfunction!(attention_map, m)?)?;
    m.add_function(wrap_pyfunction!(drop_mask, m)?)?;
    m.add_function(wrap_pyfunction!(erase, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_pool, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
