//! Python bindings for the `dna-gnn` engine.
//!
//! Configurations cross the boundary as plain dicts: keys given by the
//! caller override the defaults (or a named preset), unknown keys are
//! rejected. Results come back as dicts and lists.

use std::path::PathBuf;

use dna_gnn::analysis::{attention_records, attention_summary, influence_scores};
use dna_gnn::checkpoint::{load_checkpoint, save_checkpoint};
use dna_gnn::dataset::{load_dataset_with, make_synthetic, save_dataset, LoadOptions};
use dna_gnn::experiment::{run_experiment as run_seeds, run_seed};
use dna_gnn::layers::ModelConfig;
use dna_gnn::training::{evaluate, predict, TrainConfig};
use dna_gnn::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (_, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        Ok(Value::Null)
    } else if let Ok(b) = obj.cast::<PyBool>() {
        Ok(Value::Bool(b.is_true()))
    } else if obj.is_instance_of::<PyInt>() {
        match obj.extract::<u64>() {
            Ok(u) => Ok(Value::from(u)),
            Err(_) => Ok(Value::from(obj.extract::<i64>()?)),
        }
    } else if obj.is_instance_of::<PyFloat>() {
        Ok(Value::from(obj.extract::<f64>()?))
    } else if let Ok(s) = obj.extract::<String>() {
        Ok(Value::String(s))
    } else {
        Err(PyValueError::new_err(format!("unsupported configuration value {obj}")))
    }
}

fn serialize<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// `base` with every key of `overrides` replaced.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&Bound<'_, PyDict>>, what: &str) -> PyResult<T> {
    let Value::Object(mut map) = serde_json::to_value(base).map_err(|e| PyValueError::new_err(e.to_string()))? else {
        unreachable!("configurations serialize to objects")
    };
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            if !map.contains_key(&key) {
                let known: Vec<&String> = map.keys().collect();
                return Err(PyValueError::new_err(format!("unknown {what} key `{key}`; known keys: {known:?}")));
            }
            map.insert(key, from_py(&v)?);
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| PyValueError::new_err(format!("invalid {what}: {e}")))
}

fn model_config(preset: Option<&str>, model: Option<&Bound<'_, PyDict>>) -> PyResult<ModelConfig> {
    let base = match preset {
        Some(name) => dna_gnn::presets::preset(name).map_err(py_err)?,
        None => ModelConfig::default(),
    };
    let cfg: ModelConfig = overlay(&base, model, "model config")?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn train_config(train: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = overlay(&TrainConfig::default(), train, "training config")?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A node-classification graph with features and labels.
#[pyclass(module = "dna_gnn", frozen)]
struct Dataset {
    inner: dna_gnn::dataset::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads a dataset directory (meta.json, edges.bin, features.bin, labels.bin).
    #[staticmethod]
    #[pyo3(signature = (path, row_normalize = false))]
    fn load(path: PathBuf, row_normalize: bool) -> PyResult<Self> {
        let inner = load_dataset_with(&path, LoadOptions { row_normalize }).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n, f, c, p = 0.05, seed = 0, separable = false))]
    fn synthetic(n: usize, f: usize, c: usize, p: f64, seed: u64, separable: bool) -> PyResult<Self> {
        let inner = make_synthetic(n, f, c, p, seed, separable).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_features(&self) -> usize {
        self.inner.num_features()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    /// Undirected edges, each counted once.
    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.graph.num_undirected_edges()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.graph.undirected_edges()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.num_nodes()).map(|v| self.inner.features.row(v).to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, nodes={}, edges={}, features={}, classes={})",
            self.inner.name,
            self.num_nodes(),
            self.num_edges(),
            self.num_features(),
            self.num_classes()
        )
    }
}

/// A GCN or DNA network with its parameters.
#[pyclass(module = "dna_gnn", frozen)]
struct Model {
    inner: dna_gnn::layers::Model,
}

impl Model {
    fn check(&self, ds: &Dataset) -> PyResult<()> {
        if self.inner.in_features() != ds.inner.num_features() || self.inner.num_classes() != ds.inner.num_classes {
            return Err(PyValueError::new_err(format!(
                "model expects {} features and {} classes, dataset has {} and {}",
                self.inner.in_features(),
                self.inner.num_classes(),
                ds.inner.num_features(),
                ds.inner.num_classes
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Model {
    /// Fresh model; `config` overrides the defaults or the named preset.
    #[new]
    #[pyo3(signature = (in_features, num_classes, config = None, preset = None))]
    fn new(in_features: usize, num_classes: usize, config: Option<&Bound<'_, PyDict>>, preset: Option<&str>) -> PyResult<Self> {
        let cfg = model_config(preset, config)?;
        let inner = dna_gnn::layers::Model::new(cfg, in_features, num_classes).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(py_err)?,
        })
    }

    /// Writes `path` (a JSON manifest) and the parameter blob beside it.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.config)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.param_count()
    }

    /// Evaluation-mode logits, one row per node.
    fn predict(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        self.check(dataset)?;
        let logits = predict(&self.inner, &dataset.inner).map_err(py_err)?;
        Ok((0..dataset.inner.num_nodes()).map(|v| logits.row(v).to_vec()).collect())
    }

    fn evaluate(&self, dataset: &Dataset, mask: Vec<bool>) -> PyResult<f64> {
        self.check(dataset)?;
        if mask.len() != dataset.inner.num_nodes() {
            return Err(PyValueError::new_err(format!(
                "mask has {} entries, dataset has {} nodes",
                mask.len(),
                dataset.inner.num_nodes()
            )));
        }
        evaluate(&self.inner, &dataset.inner, &mask).map_err(py_err)
    }

    /// Normalized influence of every node on `node`.
    fn influence<'py>(&self, py: Python<'py>, dataset: &Dataset, node: usize) -> PyResult<Bound<'py, PyAny>> {
        self.check(dataset)?;
        let inf = influence_scores(&self.inner, &dataset.inner, node).map_err(py_err)?;
        serialize(py, &inf)
    }

    /// Per-layer attention statistics; an empty list for GCN models.
    fn attention_summary<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        self.check(dataset)?;
        let records = attention_records(&self.inner, &dataset.inner).map_err(py_err)?;
        if records.is_empty() {
            return Ok(PyList::empty(py).into_any());
        }
        serialize(py, &attention_summary(&records, None).map_err(py_err)?)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(kind={}, layers={}, hidden={}, params={})",
            c.layer_kind,
            c.num_layers,
            c.hidden,
            self.inner.params.param_count()
        )
    }
}

/// Trains one model on the split drawn from `seed`; returns `(model, result)`.
#[pyfunction]
#[pyo3(signature = (dataset, seed = 0, preset = None, model = None, train = None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    seed: u64,
    preset: Option<&str>,
    model: Option<&Bound<'py, PyDict>>,
    train: Option<&Bound<'py, PyDict>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let mc = model_config(preset, model)?;
    let tc = train_config(train)?;
    let ds = &dataset.inner;
    let (m, r) = py.detach(|| run_seed(&mc, &tc, ds, seed)).map_err(py_err)?;
    Ok((Model { inner: m }, serialize(py, &r)?))
}

/// Trains one model per seed; returns `(summary, models)`.
#[pyfunction]
#[pyo3(signature = (dataset, seeds, preset = None, model = None, train = None, parallel = 1))]
fn run_experiment<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    seeds: Vec<u64>,
    preset: Option<&str>,
    model: Option<&Bound<'py, PyDict>>,
    train: Option<&Bound<'py, PyDict>>,
    parallel: usize,
) -> PyResult<(Bound<'py, PyAny>, Vec<Model>)> {
    let mc = model_config(preset, model)?;
    let tc = train_config(train)?;
    let ds = &dataset.inner;
    let (result, models) = py
        .detach(|| run_seeds(&mc, &tc, ds, &seeds, parallel.max(1), |_, _| {}))
        .map_err(py_err)?;
    let models = models.into_iter().map(|inner| Model { inner }).collect();
    Ok((serialize(py, &result)?, models))
}

#[pyfunction]
fn preset_names() -> Vec<String> {
    dna_gnn::presets::preset_names()
}

/// Model configuration of a named preset.
#[pyfunction]
fn preset<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    serialize(py, &dna_gnn::presets::preset(name).map_err(py_err)?)
}

#[pyfunction]
fn default_train_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    serialize(py, &TrainConfig::default())
}

#[pymodule]
#[pyo3(name = "dna_gnn")]
fn dna_gnn_python(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
