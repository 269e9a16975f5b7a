use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nfmc::flows::{build_flow, Architecture, FlowHyperparameters, FlowModel};
use nfmc::harness::{self, ExperimentConfig, ExperimentReport, Grouping};
use nfmc::samplers::SamplerConfig;
use nfmc::targets::{build_target, TargetDistribution, TargetSpec};
use nfmc::training::{fit, FitBudget, Objective};

create_exception!(nfmc_py, NfmcError, PyException);
create_exception!(nfmc_py, ConfigError, NfmcError);

fn err(e: nfmc::Error) -> PyErr {
    match e {
        nfmc::Error::Config { .. } => ConfigError::new_err(e.to_string()),
        _ => NfmcError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    NfmcError::new_err(e.to_string())
}

/// Python object -> JSON text via the `json` module.
fn dumps(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<String> {
    py.import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A benchmark target built from a spec dict such as
/// `{"family": "gaussian", "kind": "standard", "dim": 10}`.
#[pyclass(name = "Target", frozen)]
struct PyTarget {
    inner: TargetDistribution,
}

#[pymethods]
impl PyTarget {
    #[new]
    #[pyo3(signature = (spec, dataset=None))]
    fn new(py: Python<'_>, spec: &Bound<'_, PyAny>, dataset: Option<&str>) -> PyResult<Self> {
        let spec: TargetSpec = serde_json::from_str(&dumps(py, spec)?).map_err(json_err)?;
        let ds = dataset
            .map(|p| harness::load_dataset(std::path::Path::new(p)))
            .transpose()
            .map_err(err)?;
        Ok(Self {
            inner: build_target(&spec, ds.as_ref()).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn family(&self) -> &str {
        self.inner.family()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dimension()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&x).map_err(err)
    }

    fn grad_log_density(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.grad_log_density(&x).map_err(err)
    }

    /// `(second_moment, variance)`.
    fn reference_moments(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.inner.reference_moments().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Target({}, dim={})", self.inner.name(), self.inner.dimension())
    }
}

/// A normalizing flow. `forward` maps data to latent space.
#[pyclass(name = "Flow")]
struct PyFlow {
    inner: FlowModel,
}

#[pymethods]
impl PyFlow {
    #[new]
    #[pyo3(signature = (architecture, dim, hyperparameters=None, seed=0))]
    fn new(
        py: Python<'_>,
        architecture: &str,
        dim: usize,
        hyperparameters: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Architecture::parse(architecture).map_err(err)?;
        let mut hp: FlowHyperparameters = match hyperparameters {
            Some(h) => serde_json::from_str(&dumps(py, h)?).map_err(json_err)?,
            None => FlowHyperparameters::default(),
        };
        hp.seed = seed;
        Ok(Self {
            inner: build_flow(arch, dim, &hp).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FlowModel::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters().to_vec()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&params).map_err(err)
    }

    /// `(z, log|det ∂z/∂x|)`.
    #[pyo3(signature = (x, seed=0))]
    fn forward(&self, x: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, f64)> {
        self.inner.forward(&x, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
    }

    /// `(x, log|det ∂x/∂z|)`.
    #[pyo3(signature = (z, seed=0))]
    fn inverse(&self, z: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, f64)> {
        self.inner.inverse(&z, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
    }

    #[pyo3(signature = (x, seed=0))]
    fn log_density(&self, x: Vec<f64>, seed: u64) -> PyResult<f64> {
        self.inner.log_density(&x, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
    }

    /// `n` draws and their log densities.
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        self.inner.sample(&mut ChaCha8Rng::seed_from_u64(seed), n).map_err(err)
    }

    /// Fits the flow to `target` by reverse KL; returns the best monitored
    /// loss.
    #[pyo3(signature = (target, max_steps, seed=0, step_size=None))]
    fn fit_svi(
        &mut self,
        py: Python<'_>,
        target: &PyTarget,
        max_steps: usize,
        seed: u64,
        step_size: Option<f64>,
    ) -> PyResult<f64> {
        let mut budget = FitBudget::steps(max_steps);
        if let Some(s) = step_size {
            budget.step_size = s;
        }
        let flow = &mut self.inner;
        let t = &target.inner;
        let report = py
            .detach(|| fit(flow, Objective::Svi(t), &budget, &mut ChaCha8Rng::seed_from_u64(seed)))
            .map_err(err)?;
        Ok(report.best_loss)
    }

    fn __repr__(&self) -> String {
        let arch = self.inner.architecture().map_or("custom".to_string(), |a| a.to_string());
        format!("Flow({arch}, dim={}, parameters={})", self.inner.dim(), self.inner.parameter_count())
    }
}

/// Runs a sampler given its config dict; returns the run result as a dict.
/// The flow, when given, is trained in place.
#[pyfunction]
#[pyo3(signature = (config, target, flow=None, seed=0))]
fn run_sampler<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    target: &PyTarget,
    flow: Option<&mut PyFlow>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let config: SamplerConfig = serde_json::from_str(&dumps(py, config)?).map_err(json_err)?;
    let t = &target.inner;
    let f = flow.map(|f| &mut f.inner);
    let (result, _) = py
        .detach(|| nfmc::samplers::run_sampler(&config, t, f, seed))
        .map_err(err)?;
    loads(py, &serde_json::to_string(&result).map_err(json_err)?)
}

/// Parses and validates an experiment config file; returns it as a dict.
#[pyfunction]
fn parse_config<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = harness::parse_config(std::path::Path::new(path)).map_err(err)?;
    loads(py, &serde_json::to_string(&c).map_err(json_err)?)
}

/// Runs an experiment from a config file (path) or dict; returns the report.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let config = match config.extract::<String>() {
        Ok(path) => harness::parse_config(std::path::Path::new(&path)).map_err(err)?,
        Err(_) => ExperimentConfig::from_json(&dumps(py, config)?).map_err(err)?,
    };
    let (report, _) = py.detach(|| harness::run_experiment(&config)).map_err(err)?;
    loads(py, &report.to_json().map_err(err)?)
}

/// Rank table from a list of report dicts, as a list of row dicts.
#[pyfunction]
#[pyo3(signature = (reports, group_by="family"))]
fn rank_report<'py>(
    py: Python<'py>,
    reports: Vec<Bound<'py, PyAny>>,
    group_by: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let grouping: Grouping = group_by.parse().map_err(err)?;
    let reports = reports
        .iter()
        .map(|r| ExperimentReport::from_json(&dumps(py, r)?).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    let summary = harness::rank_report(&reports, grouping);
    let rows: Vec<serde_json::Value> = summary
        .groups
        .iter()
        .flat_map(|g| {
            g.methods.iter().map(|m| {
                serde_json::json!({
                    "group": g.group,
                    "method": m.method,
                    "mean_rank": m.mean_rank,
                    "std_error": m.std_error,
                    "targets": m.targets,
                })
            })
        })
        .collect();
    loads(py, &serde_json::to_string(&rows).map_err(json_err)?)
}

#[pyfunction]
fn squared_bias(estimated_second: Vec<f64>, true_second: Vec<f64>, true_variance: Vec<f64>) -> PyResult<f64> {
    nfmc::metrics::squared_bias(&estimated_second, &true_second, &true_variance).map_err(err)
}

#[pyfunction]
fn standardize_ranks(values: Vec<f64>) -> PyResult<Vec<f64>> {
    nfmc::metrics::standardize_ranks(&values).map_err(err)
}

#[pymodule]
fn nfmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NfmcError", m.py().get_type::<NfmcError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<PyTarget>()?;
    m.add_class::<PyFlow>()?;
    m.add_function(wrap_pyfunction!(run_sampler, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(rank_report, m)?)?;
    m.add_function(wrap_pyfunction!(squared_bias, m)?)?;
    m.add_function(wrap_pyfunction!(standardize_ranks, m)?)?;
    Ok(())
}
