//! Python bindings: datasets, corruptions, CAM networks, repair and metrics.
//!
//! Images cross the boundary as flat `list[float]` in `C x H x W` order so the
//! module has no dependency beyond the interpreter; wrap them with
//! `numpy.asarray(...).reshape(3, h, w)` on the Python side if needed.

use ar2_core::cam::{compute_cam, top_k};
use ar2_core::checkpoint::Checkpoint;
use ar2_core::config::{parse_repair_config, render_repair_config, repair_preset};
use ar2_core::corrupt::{CorruptionKind, CorruptionSpec};
use ar2_core::data::{load_dataset, synthetic_shapes, write_cifar_binary, ShapeConfig};
use ar2_core::metrics::{self, evaluate, Evaluator};
use ar2_core::repair::{ar2_repair, finetune_only_baseline, Perturbation, RepairRun};
use ar2_core::train::{train_baseline, TrainConfig};
use ar2_core::{build_camnet, CamNet, WidthConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyValueError};
use pyo3::prelude::*;

create_exception!(ar2, Ar2Error, PyException, "Any failure raised by the ar2 core library.");

fn err(e: impl std::fmt::Display) -> PyErr {
    Ar2Error::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<CorruptionKind> {
    name.parse().map_err(|e: ar2_core::corrupt::CorruptionError| PyValueError::new_err(e.to_string()))
}

/// Labelled images in `[0, 1]`.
#[pyclass(name = "Dataset", module = "ar2", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: ar2_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Procedural 10-class shape images (32x32).
    #[staticmethod]
    #[pyo3(signature = (count, seed = 2024))]
    fn synthetic(count: usize, seed: u64) -> Self {
        Self {
            inner: synthetic_shapes(count, seed, &ShapeConfig::default()),
        }
    }

    /// CIFAR binary file or directory, or a PNG class directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(path).map_err(err)?,
        })
    }

    fn save_cifar(&self, path: &str) -> PyResult<()> {
        write_cifar_binary(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.input_shape();
        (c, h, w)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Pixels of one image, `C x H x W` flattened.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("index {index} out of range")));
        }
        Ok(self.inner.planar(index).to_vec())
    }

    fn split_at(&self, n: usize) -> PyResult<(Self, Self)> {
        if n > self.inner.len() {
            return Err(PyIndexError::new_err(format!("split point {n} beyond {} images", self.inner.len())));
        }
        let (a, b) = self.inner.split_at(n);
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyIndexError::new_err(format!("index {bad} out of range")));
        }
        Ok(Self {
            inner: self.inner.subset(&indices),
        })
    }

    /// Corrupted copy; image `i` uses a seed derived from `seed` and `i`.
    #[pyo3(signature = (kind_name, severity = 3, seed = 0))]
    fn corrupted(&self, kind_name: &str, severity: u8, seed: u64) -> PyResult<Self> {
        let spec = CorruptionSpec::new(kind(kind_name)?, severity, seed).map_err(err)?;
        Ok(Self {
            inner: self.inner.corrupted(&spec),
        })
    }

    fn __repr__(&self) -> String {
        let [c, h, w] = self.inner.input_shape();
        format!("Dataset(len={}, shape=({c}, {h}, {w}), classes={})", self.inner.len(), self.inner.classes())
    }
}

/// A CAM-compatible convolutional classifier.
#[pyclass(name = "Model", module = "ar2", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: CamNet<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network; `width` is `"desk"` or `"tiny"`.
    #[new]
    #[pyo3(signature = (shape = (3, 32, 32), classes = 10, width = "desk", seed = 0))]
    fn new(shape: (usize, usize, usize), classes: usize, width: &str, seed: u64) -> PyResult<Self> {
        let width = match width {
            "desk" => WidthConfig::desk(),
            "tiny" => WidthConfig::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown width {other:?}"))),
        };
        Ok(Self {
            inner: build_camnet([shape.0, shape.1, shape.2], classes, width, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.inner.clone()).save(path).map_err(err)
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.named_params().map(|(n, _)| n.to_string()).collect()
    }

    /// Logits for the given dataset rows, one list per image.
    fn logits(&self, data: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let (x, _) = data.inner.batch(&indices);
        let (logits, _) = self.inner.forward(&x).map_err(err)?;
        Ok(logits.data().chunks(self.inner.classes()).map(<[f32]>::to_vec).collect())
    }

    fn predict(&self, data: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<usize>> {
        Ok(self.logits(data, indices)?.iter().map(|row| top_k(row, 1)[0]).collect())
    }

    /// Class activation map of one image at feature resolution, row-major.
    /// Explains the top-1 class unless `class_id` is given.
    #[pyo3(signature = (data, index, class_id = None))]
    fn cam(&self, data: &PyDataset, index: usize, class_id: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
        if index >= data.inner.len() {
            return Err(PyIndexError::new_err(format!("index {index} out of range")));
        }
        let (x, _) = data.inner.batch(&[index]);
        let (logits, features) = self.inner.forward(&x).map_err(err)?;
        let class = class_id.unwrap_or_else(|| top_k(logits.data(), 1)[0]);
        let map = compute_cam(&self.inner, &features, class, "python").map_err(err)?.remove(0);
        Ok(map.values.chunks(map.width).map(<[f32]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, hash={})", self.inner.param_count(), &self.inner.content_hash()[..12])
    }
}

/// Repair hyper-parameters; see `RepairConfig.preset`.
#[pyclass(name = "RepairConfig", module = "ar2", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRepairConfig {
    inner: ar2_core::repair::RepairConfig,
}

#[pymethods]
impl PyRepairConfig {
    /// `"cifar"`, `"imagenet"` or `"desk"`.
    #[staticmethod]
    #[pyo3(signature = (name = "desk"))]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: repair_preset(name).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    /// Parses `key = value` text; unknown keys are rejected.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_repair_config(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn to_text(&self) -> String {
        render_repair_config(&self.inner)
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, v: usize) {
        self.inner.iterations = v;
    }

    #[getter]
    fn refine_steps(&self) -> usize {
        self.inner.refine_steps
    }

    #[setter]
    fn set_refine_steps(&mut self, v: usize) {
        self.inner.refine_steps = v;
    }

    #[getter]
    fn finetune_steps(&self) -> usize {
        self.inner.finetune_steps
    }

    #[setter]
    fn set_finetune_steps(&mut self, v: usize) {
        self.inner.finetune_steps = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }

    #[getter]
    fn refine_lr(&self) -> f32 {
        self.inner.refine_lr
    }

    #[setter]
    fn set_refine_lr(&mut self, v: f32) {
        self.inner.refine_lr = v;
    }

    #[getter]
    fn finetune_lr(&self) -> f32 {
        self.inner.finetune_lr
    }

    #[setter]
    fn set_finetune_lr(&mut self, v: f32) {
        self.inner.finetune_lr = v;
    }

    #[getter]
    fn max_grad_norm(&self) -> f32 {
        self.inner.max_grad_norm
    }

    #[setter]
    fn set_max_grad_norm(&mut self, v: f32) {
        self.inner.max_grad_norm = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    /// Target corruption as `"GN@3"`, or `"identity"`.
    #[getter]
    fn corruption(&self) -> String {
        match self.inner.perturbation {
            Perturbation::Identity => "identity".into(),
            p => p.to_string(),
        }
    }

    #[pyo3(signature = (kind_name, severity = 3))]
    fn set_corruption(&mut self, kind_name: &str, severity: u8) -> PyResult<()> {
        CorruptionSpec::new(kind(kind_name)?, severity, 0).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.perturbation = Perturbation::Corrupt {
            kind: kind(kind_name)?,
            severity,
        };
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("RepairConfig({})", render_repair_config(&self.inner).trim_end().replace('\n', ", "))
    }
}

/// Log and provenance of one repair run.
#[pyclass(name = "RepairRun", module = "ar2")]
pub struct PyRepairRun {
    inner: RepairRun,
}

#[pymethods]
impl PyRepairRun {
    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn stages(&self) -> Vec<String> {
        self.inner.stages().iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.log.iter().map(|e| e.loss).collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Trains a vanilla network from scratch.
#[pyfunction]
#[pyo3(signature = (data, epochs = 6, seed = 1, width = "desk"))]
fn train(py: Python<'_>, data: &PyDataset, epochs: usize, seed: u64, width: &str) -> PyResult<PyModel> {
    let width = match width {
        "desk" => WidthConfig::desk(),
        "tiny" => WidthConfig::tiny(),
        other => return Err(PyValueError::new_err(format!("unknown width {other:?}"))),
    };
    let cfg = TrainConfig {
        epochs,
        seed,
        width,
        warmup_epochs: TrainConfig::default().warmup_epochs.min(epochs as f32),
        ..TrainConfig::default()
    };
    let data = data.inner.clone();
    let (model, _) = py.detach(move || train_baseline(&data, &cfg, |_| {})).map_err(err)?;
    Ok(PyModel { inner: model })
}

/// Repairs `model` against `config`'s corruption. With `refine=False` the
/// refinement stage is skipped (fine-tune-only ablation).
#[pyfunction]
#[pyo3(signature = (model, data, config, refine = true))]
fn repair(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    config: &PyRepairConfig,
    refine: bool,
) -> PyResult<(PyModel, PyRepairRun)> {
    let (initial, data, cfg) = (model.inner.clone(), data.inner.clone(), config.inner.clone());
    let (repaired, run) = py
        .detach(move || {
            if refine {
                ar2_repair(&initial, &data, &cfg)
            } else {
                finetune_only_baseline(&initial, &data, &cfg, &mut |_| {})
            }
        })
        .map_err(|e| match e {
            ar2_core::repair::RepairError::Config(msg) => PyValueError::new_err(msg),
            other => err(other),
        })?;
    Ok((PyModel { inner: repaired }, PyRepairRun { inner: run }))
}

/// Top-1 error in percent.
#[pyfunction]
fn clean_error(model: &PyModel, data: &PyDataset) -> PyResult<f64> {
    metrics::clean_error(&model.inner, &data.inner).map_err(err)
}

/// `100 * sum(model_errors) / sum(baseline_errors)` over the five severities.
#[pyfunction]
#[pyo3(signature = (model_errors, baseline_errors, kind_name = "GN"))]
fn corruption_error(model_errors: Vec<f64>, baseline_errors: Vec<f64>, kind_name: &str) -> PyResult<f64> {
    metrics::corruption_error(kind(kind_name)?, &model_errors, &baseline_errors).map_err(err)
}

/// Clean error plus per-severity errors (and CE against `baseline`) for each
/// corruption in `kinds` (default: all 15). Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (model, data, baseline = None, kinds = None, seed = 0))]
fn evaluate_model<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    baseline: Option<&PyModel>,
    kinds: Option<Vec<String>>,
    seed: u64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let kinds: Vec<CorruptionKind> = match kinds {
        Some(names) => names.iter().map(|n| kind(n)).collect::<PyResult<_>>()?,
        None => CorruptionKind::ALL.to_vec(),
    };
    let (m, d, b) = (model.inner.clone(), data.inner.clone(), baseline.map(|b| b.inner.clone()));
    let report = py
        .detach(move || {
            let ev = Evaluator::new(&d, seed);
            evaluate(&ev, &m, b.as_ref(), &kinds)
        })
        .map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("clean_error", report.clean_error)?;
    out.set_item("mce", report.mce())?;
    let per_kind = pyo3::types::PyDict::new(py);
    for k in &report.kinds {
        let entry = pyo3::types::PyDict::new(py);
        entry.set_item("errors", k.errors.to_vec())?;
        entry.set_item("ce", k.ce)?;
        per_kind.set_item(k.kind.abbrev(), entry)?;
    }
    out.set_item("kinds", per_kind)?;
    out.set_item("text", report.to_text())?;
    Ok(out)
}

/// Abbreviations of the 15 corruption kinds in table order.
#[pyfunction]
fn corruption_kinds() -> Vec<&'static str> {
    CorruptionKind::ALL.iter().map(|k| k.abbrev()).collect()
}

#[pymodule]
fn ar2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Ar2Error", m.py().get_type::<Ar2Error>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRepairConfig>()?;
    m.add_class::<PyRepairRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(repair, m)?)?;
    m.add_function(wrap_pyfunction!(clean_error, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_error, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_kinds, m)?)?;
    Ok(())
}
