//! Python bindings: models, momentum schedules, per-domain adaptation and
//! inference, synthetic streams, and the continual-learning metrics.
//!
//! Arrays cross the boundary as a flat list of floats plus a shape, so
//! `x.ravel().tolist(), x.shape` works from numpy.

use std::path::PathBuf;

use odil::data::{Dataset, Split};
use odil::experiment::{build_stream, ExperimentConfig};
use odil::{
    AccuracyMatrix, AdaptSample, AdaptationConfig, Checkpoint, DomainStatsRegistry, MomentumSchedule, SelectionPolicy,
    TaskId, Tensor, TrainConfig,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: odil::Error) -> PyErr {
    match e {
        odil::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Builds a tensor from a flat buffer and its shape.
pub fn tensor(data: Vec<f64>, shape: Vec<usize>) -> odil::Result<Tensor> {
    Tensor::new(shape, data)
}

/// Parses a schedule preset name.
pub fn schedule(name: &str, samples: usize) -> odil::Result<MomentumSchedule> {
    match name {
        "standard" => Ok(MomentumSchedule::standard(samples)),
        "decaying" => Ok(MomentumSchedule::decaying(samples)),
        other => Err(odil::Error::Config(format!(
            "unknown schedule {other:?} (expected \"standard\" or \"decaying\")"
        ))),
    }
}

/// Splits a batch into single adaptation samples.
pub fn adapt_samples(batch: &Tensor, labels: Option<Vec<usize>>) -> odil::Result<Vec<AdaptSample>> {
    if let Some(l) = &labels {
        if l.len() != batch.batch() {
            return Err(odil::Error::Config(format!("{} samples but {} labels", batch.batch(), l.len())));
        }
    }
    let item_shape = batch.shape()[1..].to_vec();
    (0..batch.batch())
        .map(|i| {
            Ok(AdaptSample {
                input: Tensor::new(item_shape.clone(), batch.item(i).to_vec())?,
                label: labels.as_ref().map(|l| l[i]),
            })
        })
        .collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> odil::Result<AccuracyMatrix> {
    let mut m = AccuracyMatrix::new();
    for row in rows {
        m.push_row(row)?;
    }
    Ok(m)
}

/// `[alpha_1, ..., alpha_K]` of `alpha_k = decay * alpha_{k-1} + offset`.
#[pyfunction]
#[pyo3(signature = (samples, initial=0.1, decay=0.94, offset=0.05))]
fn momentum_sequence(samples: usize, initial: f64, decay: f64, offset: f64) -> PyResult<Vec<f64>> {
    odil::momentum_sequence(&MomentumSchedule {
        initial,
        decay,
        offset,
        samples,
    })
    .map_err(py_err)
}

#[pyfunction]
fn accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    odil::accuracy(&predictions, &labels).map_err(py_err)
}

/// Mean accuracy over the first `t` domains after step `t` (1-based).
#[pyfunction]
fn average_accuracy(rows: Vec<Vec<f64>>, t: usize) -> PyResult<f64> {
    odil::average_accuracy(&matrix(rows).map_err(py_err)?, t).map_err(py_err)
}

/// Mean drop from each earlier domain's best accuracy to its accuracy at step `t`.
#[pyfunction]
fn average_forgetting(rows: Vec<Vec<f64>>, t: usize) -> PyResult<f64> {
    odil::average_forgetting(&matrix(rows).map_err(py_err)?, t).map_err(py_err)
}

fn split_dict<'py>(py: Python<'py>, d: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("data", d.samples.data().to_vec())?;
    out.set_item("shape", d.samples.shape().to_vec())?;
    out.set_item("labels", d.labels.clone())?;
    Ok(out)
}

/// Materializes the reference stream (or the stream of `config_json`) for
/// `seed`. Each domain is a dict with `id`, `name`, `classes`, and the splits
/// `train` (or `None`), `test` and `adapt`, each holding `data`, `shape` and
/// `labels`.
#[pyfunction]
#[pyo3(signature = (seed=0, config_json=None))]
fn generate_stream<'py>(py: Python<'py>, seed: u64, config_json: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let stream = build_stream(&cfg, seed).map_err(py_err)?;
    stream
        .domains
        .iter()
        .map(|d| {
            let out = PyDict::new(py);
            out.set_item("id", d.id)?;
            out.set_item("name", d.name.clone())?;
            out.set_item("classes", d.classes.clone())?;
            match &d.train {
                Some(t) => out.set_item("train", split_dict(py, t)?)?,
                None => out.set_item("train", py.None())?,
            }
            out.set_item("test", split_dict(py, &d.test)?)?;
            let flat: Vec<f64> = d.adapt.iter().flat_map(|s| s.input.data().iter().copied()).collect();
            let mut shape = vec![d.adapt.len()];
            shape.extend(d.test.item_shape());
            let adapt = PyDict::new(py);
            adapt.set_item("data", flat)?;
            adapt.set_item("shape", shape)?;
            adapt.set_item("labels", d.adapt.iter().map(|s| s.label).collect::<Vec<_>>())?;
            out.set_item("adapt", adapt)?;
            Ok(out)
        })
        .collect()
}

/// A network with batch normalization.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: odil::Model,
}

#[pymethods]
impl PyModel {
    /// The reference architecture for `[3, 32, 32]` inputs.
    #[staticmethod]
    #[pyo3(signature = (classes=10, widths=(16, 32), seed=0))]
    fn reference(classes: usize, widths: (usize, usize), seed: u64) -> PyResult<Self> {
        let inner = odil::Model::new(odil::ModelConfig::reference(widths, classes), seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// A model from a JSON `ModelConfig`.
    #[staticmethod]
    #[pyo3(signature = (config_json, seed=0))]
    fn from_config_json(config_json: &str, seed: u64) -> PyResult<Self> {
        let config: odil::ModelConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: odil::Model::new(config, seed).map_err(py_err)?,
        })
    }

    /// The model stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), 0, None).save(&path).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.config().input_shape.clone()
    }

    /// Eval-mode logits, one row per sample.
    fn forward(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let logits = self.inner.forward_eval(&tensor(data, shape).map_err(py_err)?).map_err(py_err)?;
        Ok(logits.data().chunks(self.inner.classes()).map(<[f64]>::to_vec).collect())
    }

    fn predict(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(data, shape).map_err(py_err)?, 256).map_err(py_err)
    }

    /// `(running_mean, running_var)` of every batchnorm layer, in order.
    fn bn_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.inner
            .bn_layers()
            .map(|bn| (bn.running_mean().to_vec(), bn.running_var().to_vec()))
            .collect()
    }

    /// Trains all parameters from this model on a labelled split and returns
    /// the result; this model is unchanged.
    #[pyo3(signature = (data, shape, labels, epochs=30, seed=0))]
    fn train(&self, data: Vec<f64>, shape: Vec<usize>, labels: Vec<usize>, epochs: usize, seed: u64) -> PyResult<Self> {
        let classes: Vec<usize> = (0..self.inner.classes()).collect();
        let train = Dataset::new(1, Split::Train, classes, tensor(data, shape).map_err(py_err)?, labels).map_err(py_err)?;
        let cfg = TrainConfig {
            base_epochs: epochs,
            ..TrainConfig::default()
        };
        let (inner, _) = odil::train_base(&self.inner, &train, &cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_shape={:?}, classes={}, bn_layers={})",
            self.inner.config().input_shape,
            self.inner.classes(),
            self.inner.bn_signature().len()
        )
    }
}

/// A trained model plus the registry of per-domain batchnorm statistics.
#[pyclass(name = "Learner")]
struct PyLearner {
    model: odil::Model,
    registry: DomainStatsRegistry,
}

#[pymethods]
impl PyLearner {
    /// Registers the model's current statistics as task 1.
    #[new]
    fn new(model: &PyModel) -> Self {
        Self {
            registry: DomainStatsRegistry::from_base(&model.inner),
            model: model.inner.clone(),
        }
    }

    /// Adapts batchnorm statistics to a new domain from its `K` samples and
    /// registers them under `task_id`. Returns the chosen step (1-based).
    #[pyo3(signature = (task_id, data, shape, labels=None, schedule="standard", selection="final-k"))]
    fn adapt(
        &mut self,
        task_id: u32,
        data: Vec<f64>,
        shape: Vec<usize>,
        labels: Option<Vec<usize>>,
        schedule: &str,
        selection: &str,
    ) -> PyResult<usize> {
        let batch = tensor(data, shape).map_err(py_err)?;
        let samples = adapt_samples(&batch, labels).map_err(py_err)?;
        let mut config = AdaptationConfig::new(self::schedule(schedule, samples.len()).map_err(py_err)?);
        config.selection = match selection {
            "final-k" => SelectionPolicy::FinalK,
            "best-labeled" => SelectionPolicy::BestLabeled,
            other => return Err(PyValueError::new_err(format!("unknown selection {other:?}"))),
        };
        let snap = odil::adapt_domain(&mut self.model, &mut self.registry, TaskId(task_id), &samples, &config)
            .map_err(py_err)?;
        Ok(match snap.origin() {
            odil::batchnorm::SnapshotOrigin::Adapted { chosen_step, .. } => *chosen_step,
            _ => samples.len(),
        })
    }

    /// Classifies a batch with the statistics registered for `task_id`.
    fn infer(&mut self, task_id: u32, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<usize>> {
        let x = tensor(data, shape).map_err(py_err)?;
        odil::infer_with_task(&mut self.model, &self.registry, TaskId(task_id), &x).map_err(py_err)
    }

    /// Registered task ids in insertion order.
    fn tasks(&self) -> Vec<u32> {
        self.registry.task_ids().map(|t| t.0).collect()
    }

    /// `(running_mean, running_var)` per batchnorm layer for `task_id`.
    fn stats(&self, task_id: u32) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
        let snap = self.registry.get(TaskId(task_id)).map_err(py_err)?;
        Ok(snap.layers().iter().map(|l| (l.running_mean.clone(), l.running_var.clone())).collect())
    }

    /// Writes the model and registry as one checkpoint.
    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        Checkpoint::new(self.model.clone(), seed, Some(self.registry.clone()))
            .save(&path)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let registry = ckpt.registry.clone().unwrap_or_else(|| DomainStatsRegistry::from_base(&ckpt.model));
        Ok(Self {
            model: ckpt.model,
            registry,
        })
    }
}

#[pymodule]
fn odil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(momentum_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(generate_stream, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLearner>()?;
    Ok(())
}
