//! Python bindings: run configuration, the pipeline commands, registered
//! models and the uplift-curve metrics.

use std::path::PathBuf;

use chrono::NaiveDate;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use hte_core::config::RunConfig;
use hte_core::data::{decode_scoring_line, Arm, FeatureSchema};
use hte_core::evaluation::{auuc as core_auuc, uplift_curve_from_parts, UpliftCurve};
use hte_core::pipeline::{self, ScoreRequest};
use hte_core::registry::Registry;
use hte_core::tlearner::TLearnerModel;

create_exception!(hte, HteError, PyException, "Base class for toolkit errors.");
create_exception!(hte, ConfigError, HteError, "Invalid configuration or parameter.");
create_exception!(hte, DataError, HteError, "Unreadable, inconsistent or insufficient data.");
create_exception!(hte, DivergenceError, HteError, "Training produced non-finite values.");

fn err(e: hte_core::HteError) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        1 => ConfigError::new_err(msg),
        3 => DivergenceError::new_err(msg),
        _ => DataError::new_err(msg),
    }
}

/// Converts any serializable value to plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DataError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_date(s: &str) -> PyResult<NaiveDate> {
    s.parse().map_err(|e| ConfigError::new_err(format!("invalid date {s:?}: {e}")))
}

/// A run configuration. Built from a TOML file, a TOML string or defaults.
#[pyclass(module = "hte", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Copy with a new top-level seed; all sub-seeds are re-derived.
    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn pool(&self) -> PathBuf {
        self.inner.paths.pool.clone()
    }

    #[setter]
    fn set_pool(&mut self, p: PathBuf) {
        self.inner.paths.pool = p;
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.paths.output.clone()
    }

    #[setter]
    fn set_output(&mut self, p: PathBuf) {
        self.inner.paths.output = p;
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, pool={:?}, output={:?})",
            self.inner.seed, self.inner.paths.pool, self.inner.paths.output
        )
    }
}

/// Generates the configured pool or stream; returns the manifest summary.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::simulate(&config.inner)).map_err(err)?;
    let d = serde_json::json!({
        "dir": out.dir,
        "n_experiments": out.n_experiments,
        "n_rows": out.n_rows,
        "manifest": out.manifest,
    });
    to_py(py, &d)
}

/// Applies the selection criteria and grid variants; one summary per variant.
#[pyfunction]
fn select<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::select(&config.inner)).map_err(err)?;
    to_py(py, &out)
}

/// Selects, fits one model per scope, evaluates and registers.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::train(&config.inner)).map_err(err)?;
    let d = serde_json::json!({
        "as_of_date": out.as_of_date,
        "metric": out.metric,
        "selection": out.selection,
        "eval_experiment_ids": out.eval_experiment_ids,
        "dropped_eval_ids": out.dropped_eval_ids,
        "models": out.entries,
        "report": out.report,
        "report_text": out.report.as_ref().map(|r| r.to_text()),
    });
    to_py(py, &d)
}

#[pyfunction]
#[pyo3(signature = (config, models=Vec::new(), experiments=Vec::new()))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &Config,
    models: Vec<String>,
    experiments: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let out = py
        .detach(|| pipeline::evaluate(&config.inner, &models, &experiments))
        .map_err(err)?;
    let d = serde_json::json!({
        "report": out.report,
        "report_text": out.report.to_text(),
        "dropped_eval_ids": out.dropped_eval_ids,
    });
    to_py(py, &d)
}

/// Scores a JSON-lines file into a CSV; returns the number of rows written.
#[pyfunction]
#[pyo3(signature = (config, model, input, output, schema=None, score_date=None, sensitivity=false))]
fn score(
    py: Python<'_>,
    config: &Config,
    model: String,
    input: PathBuf,
    output: PathBuf,
    schema: Option<PathBuf>,
    score_date: Option<&str>,
    sensitivity: bool,
) -> PyResult<usize> {
    let req = ScoreRequest {
        model_id: model,
        input,
        output,
        schema,
        score_date: score_date.map(parse_date).transpose()?,
        sensitivity,
    };
    let out = py.detach(|| pipeline::score(&config.inner, &req)).map_err(err)?;
    Ok(out.rows)
}

/// Runs the weekly cadence; returns the ledger records per mode.
#[pyfunction]
fn run_cadence<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::run_cadence(&config.inner)).map_err(err)?;
    let records: std::collections::BTreeMap<&str, _> = out.records.iter().map(|(m, r)| (m.as_str(), r)).collect();
    to_py(py, &records)
}

#[pyfunction]
fn registry_list<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &pipeline::registry_list(&config.inner).map_err(err)?)
}

#[pyfunction]
fn registry_show<'py>(py: Python<'py>, config: &Config, model: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &pipeline::registry_show(&config.inner, model).map_err(err)?)
}

/// A registered T-learner with the feature schema it scores against.
#[pyclass(module = "hte")]
struct Model {
    id: String,
    model: TLearnerModel,
    schema: FeatureSchema,
}

#[pymethods]
impl Model {
    /// Loads a model by id or unique prefix from the configured registry.
    /// The schema defaults to the pool's header.
    #[staticmethod]
    #[pyo3(signature = (config, model, schema=None))]
    fn load(config: &Config, model: &str, schema: Option<PathBuf>) -> PyResult<Self> {
        let registry = Registry::open(config.inner.paths.output.join("registry")).map_err(err)?;
        let (entry, model) = registry.load_model(model).map_err(err)?;
        let path = schema.unwrap_or_else(|| config.inner.paths.pool.join(pipeline::SCHEMA_FILE));
        let schema = pipeline::read_schema(&path).map_err(err)?;
        model.transform.check_schema(&schema).map_err(err)?;
        Ok(Self {
            id: entry.model_id,
            model,
            schema,
        })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.id
    }

    #[getter]
    fn scope(&self) -> String {
        self.model.scope.to_string()
    }

    #[getter]
    fn metric(&self) -> &str {
        &self.model.metric
    }

    #[getter]
    fn training_experiment_ids(&self) -> Vec<String> {
        self.model.training_experiment_ids.clone()
    }

    /// Predicted ITE for each JSON record (same layout as the data files;
    /// only `user_id` and the features are read).
    fn predict(&self, py: Python<'_>, records: Vec<String>) -> PyResult<Vec<f64>> {
        py.detach(|| {
            let obs = records
                .iter()
                .enumerate()
                .map(|(i, r)| decode_scoring_line(r, i + 1, &self.schema))
                .collect::<hte_core::Result<Vec<_>>>()?;
            self.model.predict_ite_batch(&self.schema, &obs)
        })
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(id={:?}, scope={:?})", &self.id[..12], self.model.scope.to_string())
    }
}

fn curve(scores: &[f64], user_ids: &[String], treated: &[bool], outcomes: &[f64], n_points: usize) -> PyResult<UpliftCurve> {
    let ids: Vec<&str> = user_ids.iter().map(String::as_str).collect();
    let arms: Vec<Arm> = treated
        .iter()
        .map(|&t| if t { Arm::Treatment } else { Arm::Control })
        .collect();
    uplift_curve_from_parts(scores, &ids, &arms, outcomes, n_points).map_err(err)
}

/// Uplift curve as `(t, cumulative_gain)` pairs, `t` in [0, 1].
#[pyfunction]
#[pyo3(signature = (scores, user_ids, treated, outcomes, n_points=100))]
fn uplift_curve(
    scores: Vec<f64>,
    user_ids: Vec<String>,
    treated: Vec<bool>,
    outcomes: Vec<f64>,
    n_points: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let c = curve(&scores, &user_ids, &treated, &outcomes, n_points)?;
    Ok(c.points.iter().map(|p| (p.t, p.gain)).collect())
}

/// Area under the uplift curve normalized by the total gain
/// (0.5 for a random ranking).
#[pyfunction]
#[pyo3(signature = (scores, user_ids, treated, outcomes, n_points=100))]
fn auuc(scores: Vec<f64>, user_ids: Vec<String>, treated: Vec<bool>, outcomes: Vec<f64>, n_points: usize) -> PyResult<f64> {
    core_auuc(&curve(&scores, &user_ids, &treated, &outcomes, n_points)?).map_err(err)
}

#[pymodule]
fn hte(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("HteError", py.get_type::<HteError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("DivergenceError", py.get_type::<DivergenceError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(run_cadence, m)?)?;
    m.add_function(wrap_pyfunction!(registry_list, m)?)?;
    m.add_function(wrap_pyfunction!(registry_show, m)?)?;
    m.add_function(wrap_pyfunction!(uplift_curve, m)?)?;
    m.add_function(wrap_pyfunction!(auuc, m)?)?;
    Ok(())
}
