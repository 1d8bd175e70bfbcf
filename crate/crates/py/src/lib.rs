//! Python bindings: configs, runs, reports, checkpoints, CDA and the bias
//! metrics.

use std::path::PathBuf;

use peft_debias::cda::{counterfactuals as cda_counterfactuals, AttributeTable};
use peft_debias::checkpoint::{load_backbone, load_peft};
use peft_debias::config::{parse_config, parse_grid, ExperimentConfig};
use peft_debias::corpus::{
    encode_words, AxisName, BiasAxis, Gender, LabeledCorpus, LabeledExample, ProtectedAnnotation, Vocabulary,
};
use peft_debias::metrics::{self, MetricReport};
use peft_debias::model::TransformerParams;
use peft_debias::peft::PeftParams;
use peft_debias::pipeline::{self, Criterion};
use peft_debias::synthetic::{prepare_fixtures, PretrainSettings, SuiteConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: peft_debias::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "ExperimentConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses a TOML config; `overrides` are dotted `key=value` strings.
    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        parse_config(&path, &overrides).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn axis(&self) -> String {
        self.inner.axis.to_string()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    /// Upstream, downstream and evaluation into `runs_dir/<name>`.
    fn run(&self, py: Python<'_>, runs_dir: PathBuf) -> PyResult<PyReport> {
        let cfg = self.inner.clone();
        py.detach(move || pipeline::run_experiment(&cfg, &runs_dir))
            .map(|a| PyReport { inner: a.report })
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(name={:?}, method={}, seed={})", self.inner.name, self.inner.method, self.inner.seed)
    }
}

#[pyclass(name = "Report", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyReport {
    inner: MetricReport,
}

#[pymethods]
impl PyReport {
    /// Reads `report.json` from a run directory.
    #[staticmethod]
    fn load(run_dir: PathBuf) -> PyResult<Self> {
        MetricReport::load(&run_dir).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.run.name.clone()
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.run.method.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    /// Metric by its table name (`"ACC"`, `"TPR-GAP"`, ...); `None` when the
    /// run does not report it.
    fn get(&self, metric: &str) -> PyResult<Option<f64>> {
        let i = metrics::COLUMNS
            .iter()
            .position(|c| *c == metric)
            .ok_or_else(|| PyValueError::new_err(format!("unknown metric {metric:?}; known: {:?}", metrics::COLUMNS)))?;
        Ok(self.inner.values()[i])
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("Report(name={:?})", self.inner.run.name)
    }
}

#[pyclass(name = "Backbone", frozen)]
struct PyBackbone {
    inner: TransformerParams,
}

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_backbone(&path).map(|(inner, _)| Self { inner }).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.config.num_layers
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.config.hidden
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

#[pyclass(name = "PeftModule", frozen)]
struct PyPeft {
    inner: PeftParams,
    axis: Option<AxisName>,
}

#[pymethods]
impl PyPeft {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (ck, _) = load_peft(&path).map_err(err)?;
        Ok(Self {
            inner: ck.peft,
            axis: ck.axis,
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn axis(&self) -> Option<String> {
        self.axis.map(|a| a.to_string())
    }

    #[getter]
    fn num_params(&self) -> usize {
        peft_debias::peft::count_params(&self.inner)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

/// Writes the synthetic planted-bias suite and returns the grid config path.
#[pyfunction]
#[pyo3(signature = (out, seed = 2023, pretrain_steps = None))]
fn prepare_data(py: Python<'_>, out: PathBuf, seed: u64, pretrain_steps: Option<usize>) -> PyResult<PathBuf> {
    let suite = SuiteConfig {
        seed,
        ..SuiteConfig::default()
    };
    let mut pre = PretrainSettings::default();
    if let Some(s) = pretrain_steps {
        pre.steps = s;
    }
    py.detach(move || prepare_fixtures(&out, &suite, &pre)).map(|f| f.grid).map_err(err)
}

/// Runs a grid file; returns the reports in grid order.
#[pyfunction]
#[pyo3(signature = (grid, runs_dir, jobs = 1))]
fn run_grid(py: Python<'_>, grid: PathBuf, runs_dir: PathBuf, jobs: usize) -> PyResult<Vec<PyReport>> {
    let g = parse_grid(&grid).map_err(err)?;
    let out = py.detach(move || pipeline::run_grid(&g, &runs_dir, jobs)).map_err(err)?;
    Ok(out.cells.into_iter().map(|(_, r)| PyReport { inner: r }).collect())
}

/// Step of the chosen checkpoint: `"min_loss"` or `"max_metric"`, ties to
/// the earliest.
#[pyfunction]
fn select_checkpoint(curve: Vec<(usize, f64)>, criterion: &str) -> PyResult<Option<usize>> {
    let c = match criterion {
        "min_loss" => Criterion::MinLoss,
        "max_metric" => Criterion::MaxMetric,
        other => return Err(PyValueError::new_err(format!("criterion {other:?} is not min_loss or max_metric"))),
    };
    Ok(pipeline::select_checkpoint(&curve, c))
}

fn gold(labels: &[usize], protected: Vec<ProtectedAnnotation>) -> PyResult<LabeledCorpus> {
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let examples = labels
        .iter()
        .zip(protected)
        .map(|(&label, protected)| LabeledExample {
            ids: vec![0],
            label,
            protected,
        })
        .collect();
    LabeledCorpus::new((0..classes).map(|c| c.to_string()).collect(), examples).map_err(err)
}

fn same_len(a: usize, b: usize, what: &str) -> PyResult<()> {
    if a == b {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!("{a} predictions but {b} {what}")))
    }
}

/// RMS over occupations of the female-minus-male true positive rate gap.
#[pyfunction]
fn tpr_gap(predictions: Vec<usize>, labels: Vec<usize>, female: Vec<bool>) -> PyResult<f64> {
    same_len(predictions.len(), labels.len(), "labels")?;
    same_len(predictions.len(), female.len(), "gender flags")?;
    let protected = female
        .iter()
        .map(|&f| ProtectedAnnotation::gender(if f { Gender::Female } else { Gender::Male }))
        .collect();
    metrics::tpr_gap(&predictions, &gold(&labels, protected)?)
        .map(|r| r.aggregate)
        .map_err(err)
}

/// Sum over identifiers of |FPR on negatives mentioning it - overall FPR|.
#[pyfunction]
#[pyo3(signature = (predictions, labels, mentions, identifiers, positive = 1))]
fn fprd(
    predictions: Vec<usize>,
    labels: Vec<usize>,
    mentions: Vec<Vec<String>>,
    identifiers: Vec<String>,
    positive: usize,
) -> PyResult<f64> {
    same_len(predictions.len(), labels.len(), "labels")?;
    same_len(predictions.len(), mentions.len(), "mention lists")?;
    let protected = mentions.into_iter().map(ProtectedAnnotation::mentions).collect();
    metrics::fprd(&predictions, &gold(&labels, protected)?, &identifiers, positive)
        .map(|r| r.total)
        .map_err(err)
}

/// Fraction of predictions equal to the neutral label.
#[pyfunction]
#[pyo3(signature = (predictions, neutral = 1))]
fn bias_nli_fn(predictions: Vec<usize>, neutral: usize) -> PyResult<f64> {
    metrics::bias_nli_fn(&predictions, neutral).map_err(err)
}

/// Counterfactual rewrites of `text` along the axis given by `tuples`
/// (pairs for gender, triples for race). Empty when no attribute word
/// occurs.
#[pyfunction]
fn counterfactuals(text: &str, tuples: Vec<Vec<String>>) -> PyResult<Vec<String>> {
    let name = match tuples.first().map(Vec::len) {
        Some(2) => AxisName::Gender,
        Some(3) => AxisName::Race,
        _ => return Err(PyValueError::new_err("tuples must be pairs (gender) or triples (race)")),
    };
    let axis = BiasAxis::new(name, tuples).map_err(err)?;
    let norm = peft_debias::corpus::normalize_text(text);
    let words = peft_debias::corpus::split_words(&norm)
        .into_iter()
        .map(String::from)
        .chain(axis.words().map(String::from))
        .collect::<std::collections::BTreeSet<_>>();
    let vocab = Vocabulary::from_words(words).map_err(err)?;
    let table = AttributeTable::new(&axis, &vocab).map_err(err)?;
    let ids = encode_words(&norm, &vocab);
    Ok(cda_counterfactuals(&ids, &table)
        .iter()
        .map(|s| peft_debias::corpus::detokenize(s, &vocab))
        .collect())
}

#[pymodule]
fn peft_debias_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyPeft>()?;
    m.add_function(wrap_pyfunction!(prepare_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(tpr_gap, m)?)?;
    m.add_function(wrap_pyfunction!(fprd, m)?)?;
    m.add_function(wrap_pyfunction!(bias_nli_fn, m)?)?;
    m.add_function(wrap_pyfunction!(counterfactuals, m)?)?;
    Ok(())
}
