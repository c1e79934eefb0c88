//! Python module `qeot`: configuration, synthetic data, model, training and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qeot::config::RunConfig;
use qeot::data::{self, Sample};
use qeot::eval::{self, MetricsReport};
use qeot::geometry::{self, BoxCxCyWh};
use qeot::matcher::{self, CostMatrix};
use qeot::model::{ModelInput, ModelOutput, Qeot};
use qeot::train::{self, StepLog, Trainer};
use qeot::triple::Triple;
use qeot::Tensor;

type BoxTuple = (f64, f64, f64, f64);
type TripleTuple = (usize, usize, usize, BoxTuple);

fn err(e: qeot::Error) -> PyErr {
    if e.is_invalid_input() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_box(b: BoxTuple) -> BoxCxCyWh {
    BoxCxCyWh::from_slice(&[b.0, b.1, b.2, b.3])
}

fn from_box(b: &BoxCxCyWh) -> BoxTuple {
    let [cx, cy, w, h] = b.to_array();
    (cx, cy, w, h)
}

fn to_triple(t: TripleTuple) -> Triple {
    Triple::new(t.0, t.1, t.2, to_box(t.3))
}

fn from_triple(t: &Triple) -> TripleTuple {
    (t.start, t.end, t.relation, from_box(&t.bbox))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in [
        ("triple_p", m.triple_p),
        ("triple_r", m.triple_r),
        ("triple_f1", m.triple_f1),
        ("pair_p", m.pair_p),
        ("pair_r", m.pair_r),
        ("pair_f1", m.pair_f1),
        ("rel_acc", m.rel_acc),
        ("ent_acc", m.ent_acc),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

fn log_dict<'py>(py: Python<'py>, l: &StepLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", l.step)?;
    for (k, v) in [("total", l.total), ("ent", l.ent), ("rel", l.rel), ("l1", l.l1), ("giou", l.giou), ("lr", l.lr)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

fn samples(list: &[PyRef<'_, PySample>]) -> Vec<Sample> {
    list.iter().map(|s| s.0.clone()).collect()
}

/// Flat run configuration; keyword arguments override defaults.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(RunConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = RunConfig::default();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                c.set(&k.extract::<String>()?, &v.str()?.to_string().to_lowercase()).map_err(err)?;
            }
        }
        Ok(Self(c))
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_file(&path).map(Self).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(err)
    }

    fn get(&self, py: Python<'_>, key: &str) -> PyResult<Py<PyAny>> {
        let text = self.0.to_text();
        let value = text
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))?;
        let json = py.import("json")?;
        Ok(json.call_method1("loads", (value,))?.unbind())
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(queries={}, d_model={}, lr={}, steps={})", self.0.queries, self.0.d_model, self.0.lr, self.0.steps)
    }
}

#[pyclass(name = "Sample", skip_from_py_object)]
#[derive(Clone)]
struct PySample(Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<usize> {
        self.0.tokens.clone()
    }

    /// `(G, G, c)` nested lists.
    #[getter]
    fn grid(&self) -> Vec<Vec<Vec<f64>>> {
        let s = self.0.grid.shape();
        let (g, c) = (s[0], s[2]);
        let d = self.0.grid.data();
        (0..g).map(|y| (0..g).map(|x| d[(y * g + x) * c..(y * g + x + 1) * c].to_vec()).collect()).collect()
    }

    /// `(start, end, relation, (cx, cy, w, h))` tuples.
    #[getter]
    fn gold(&self) -> Vec<TripleTuple> {
        self.0.gold.iter().map(from_triple).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, triples={})", self.0.id, self.0.gold.len())
    }
}

/// Generates the synthetic `(train, test)` splits for a configuration.
#[pyfunction]
fn generate(config: PyRef<'_, PyConfig>) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
    let d = data::generate(&config.0.dataset_spec()).map_err(err)?;
    let wrap = |v: Vec<Sample>| v.into_iter().map(PySample).collect();
    Ok((wrap(d.train), wrap(d.test)))
}

#[pyfunction]
fn save_samples(list: Vec<PyRef<'_, PySample>>, path: PathBuf) -> PyResult<()> {
    data::save(&samples(&list), &path).map_err(err)
}

#[pyfunction]
fn load_samples(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(data::load(&path).map_err(err)?.into_iter().map(PySample).collect())
}

#[pyclass(name = "Model")]
struct PyModel(Qeot);

impl PyModel {
    fn output(&self, s: &Sample) -> PyResult<ModelOutput> {
        self.0
            .predict(ModelInput {
                tokens: &s.tokens,
                grid: &s.grid,
            })
            .map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: PyRef<'_, PyConfig>) -> PyResult<Self> {
        config.0.validate().map_err(err)?;
        Qeot::new(config.0.model_config()).map(Self).map_err(err)
    }

    /// Loads parameters from a training checkpoint.
    #[staticmethod]
    fn load(config: PyRef<'_, PyConfig>, path: PathBuf) -> PyResult<Self> {
        train::load_model(config.0.model_config(), &path).map(Self).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params.num_scalars()
    }

    fn param_names(&self) -> Vec<String> {
        self.0.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Raw heads: `start_dist`, `end_dist`, `rel_logits`, `boxes` as nested lists.
    fn predict<'py>(&self, py: Python<'py>, sample: PyRef<'_, PySample>) -> PyResult<Bound<'py, PyDict>> {
        let o = self.output(&sample.0)?;
        let d = PyDict::new(py);
        d.set_item("start_dist", rows(&o.start_dist))?;
        d.set_item("end_dist", rows(&o.end_dist))?;
        d.set_item("rel_logits", rows(&o.rel_logits))?;
        d.set_item("boxes", rows(&o.boxes))?;
        Ok(d)
    }

    fn decode(&self, sample: PyRef<'_, PySample>) -> PyResult<Vec<TripleTuple>> {
        Ok(eval::decode(&self.output(&sample.0)?).iter().map(from_triple).collect())
    }

    #[pyo3(signature = (samples_, theta = eval::DEFAULT_IOU_THRESHOLD))]
    fn evaluate<'py>(&self, py: Python<'py>, samples_: Vec<PyRef<'_, PySample>>, theta: f64) -> PyResult<Bound<'py, PyDict>> {
        let (m, _) = eval::evaluate_dataset(&self.0, &samples(&samples_), theta).map_err(err)?;
        metrics_dict(py, &m)
    }
}

#[pyclass(name = "Trainer")]
struct PyTrainer(Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, resume = None))]
    fn new(config: PyRef<'_, PyConfig>, resume: Option<PathBuf>) -> PyResult<Self> {
        let c = &config.0;
        c.validate().map_err(err)?;
        let t = match resume {
            Some(p) => Trainer::resume(c.model_config(), c.train_config(), &p),
            None => Qeot::new(c.model_config()).and_then(|m| Trainer::new(m, c.train_config())),
        };
        t.map(Self).map_err(err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.0.step
    }

    /// One optimizer step on the next batch.
    fn step_once<'py>(&mut self, py: Python<'py>, train: Vec<PyRef<'_, PySample>>) -> PyResult<Bound<'py, PyDict>> {
        let log = self.0.step_once(&samples(&train)).map_err(err)?;
        log_dict(py, &log)
    }

    /// Trains until `steps` steps are complete and returns the per-step logs.
    #[pyo3(signature = (train, steps = None))]
    fn run<'py>(&mut self, py: Python<'py>, train: Vec<PyRef<'_, PySample>>, steps: Option<usize>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        if let Some(s) = steps {
            self.0.config.steps = s;
        }
        let data = samples(&train);
        let mut logs = Vec::new();
        self.0
            .run(&data, |_, l| {
                logs.push(*l);
                Ok(())
            })
            .map_err(err)?;
        logs.iter().map(|l| log_dict(py, l)).collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// A copy of the current model.
    fn model(&self) -> PyModel {
        PyModel(self.0.model.clone())
    }
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> f64 {
    geometry::iou(&to_box(a).to_xyxy(), &to_box(b).to_xyxy())
}

#[pyfunction]
fn giou(a: BoxTuple, b: BoxTuple) -> f64 {
    geometry::giou(&to_box(a).to_xyxy(), &to_box(b).to_xyxy())
}

/// Column chosen for each row of a cost matrix with `rows <= cols`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let m = CostMatrix::from_rows(&cost).map_err(err)?;
    Ok(matcher::hungarian(&m).as_slice().to_vec())
}

/// `(tp, fp, fn)` of the box-aware triple metric.
#[pyfunction]
#[pyo3(signature = (pred, gold, theta = eval::DEFAULT_IOU_THRESHOLD))]
fn triple_fpr(pred: Vec<TripleTuple>, gold: Vec<TripleTuple>, theta: f64) -> (usize, usize, usize) {
    let p: Vec<Triple> = pred.into_iter().map(to_triple).collect();
    let g: Vec<Triple> = gold.into_iter().map(to_triple).collect();
    let c = eval::triple_fpr(&p, &g, theta);
    (c.tp, c.fp, c.fn_)
}

#[pymodule]
#[pyo3(name = "qeot")]
fn qeot_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(save_samples, m)?)?;
    m.add_function(wrap_pyfunction!(load_samples, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(triple_fpr, m)?)?;
    Ok(())
}
