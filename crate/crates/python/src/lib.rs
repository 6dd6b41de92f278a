//! Python bindings. Structured options (configs, moment and propensity
//! specs) cross the boundary as dicts or JSON strings with the same layout
//! as the command-line config files.

use std::fs::File;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use auxgmm::config::{default_simulation_config, RunConfig};
use auxgmm::data::{load_dataset, write_dataset, Case, Observation};
use auxgmm::estimators::{estimate as core_estimate, plugin_bounds as core_plugin_bounds, Estimate};
use auxgmm::simulate::{generate, oracle_for, run_monte_carlo, DgpSpec};
use auxgmm::Error;

create_exception!(pyauxgmm, AuxgmmError, PyException);

fn to_py(err: Error) -> PyErr {
    AuxgmmError::new_err(format!("{}: {}", err.kind(), err))
}

fn parse_case(case: &str) -> PyResult<Case> {
    case.parse().map_err(to_py)
}

/// Accepts a JSON string or any object `json.dumps` understands.
fn from_py_json<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if let Ok(s) = obj.cast::<PyString>() {
        s.to_string()
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| to_py(Error::Config(e.to_string())))
}

fn to_py_json<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| to_py(Error::Config(e.to_string())))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn run_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<RunConfig> {
    let cfg: RunConfig = match config {
        Some(c) => from_py_json(c)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Pooled primary and auxiliary samples.
#[pyclass(module = "pyauxgmm", frozen)]
struct Dataset {
    inner: auxgmm::data::Dataset,
}

#[pymethods]
impl Dataset {
    /// `y[i]` must be `None` for primary rows (`d[i] == 1`) in the
    /// verify-out case.
    #[new]
    #[pyo3(signature = (x, d, y, case = "verify-out"))]
    fn new(x: Vec<Vec<f64>>, d: Vec<u8>, y: Vec<Option<Vec<f64>>>, case: &str) -> PyResult<Self> {
        if x.len() != d.len() || y.len() != d.len() {
            return Err(to_py(Error::ShapeMismatch("x, d and y need one entry per row".into())));
        }
        let rows = x
            .into_iter()
            .zip(d)
            .zip(y)
            .map(|((x, d), y)| Observation { x, y, d })
            .collect();
        let inner = auxgmm::data::Dataset::new(rows, parse_case(case)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, case = "verify-out"))]
    fn from_csv(path: &str, case: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(|source| {
            to_py(Error::Io {
                path: path.into(),
                source,
            })
        })?;
        let inner = load_dataset(file, None, parse_case(case)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Draw a sample from a named process (`dgp-a`, `dgp-a-constant`, `dgp-b`).
    #[staticmethod]
    #[pyo3(signature = (preset, n, seed, case = "verify-out"))]
    fn simulate(preset: &str, n: usize, seed: u64, case: &str) -> PyResult<Self> {
        let spec = DgpSpec::preset(preset, parse_case(case)?).map_err(to_py)?;
        let inner = generate(&spec, n, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(|source| {
            to_py(Error::Io {
                path: path.into(),
                source,
            })
        })?;
        write_dataset(&self.inner, file).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_primary(&self) -> usize {
        self.inner.n_primary()
    }

    #[getter]
    fn n_auxiliary(&self) -> usize {
        self.inner.n_auxiliary()
    }

    #[getter]
    fn d_x(&self) -> usize {
        self.inner.d_x()
    }

    #[getter]
    fn d_y(&self) -> usize {
        self.inner.d_y()
    }

    #[getter]
    fn case(&self) -> &'static str {
        self.inner.case().as_str()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, n_primary={}, case='{}')",
            self.inner.n(),
            self.inner.n_primary(),
            self.inner.case().as_str()
        )
    }
}

#[pyclass(module = "pyauxgmm", name = "Estimate", frozen)]
struct PyEstimate {
    inner: Estimate,
}

#[pymethods]
impl PyEstimate {
    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.as_str()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.inner.se.clone()
    }

    #[getter]
    fn vcov(&self) -> Vec<Vec<f64>> {
        self.inner.vcov.clone()
    }

    #[getter]
    fn omega(&self) -> Vec<Vec<f64>> {
        self.inner.omega.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.diagnostics.converged
    }

    #[getter]
    fn diagnostics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &self.inner.diagnostics)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Estimate(label='{}', beta={:?}, se={:?})",
            self.inner.label, self.inner.beta, self.inner.se
        )
    }
}

/// Run every estimator of a run configuration on `data`. The case is taken
/// from the dataset.
#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn estimate(data: &Dataset, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<PyEstimate>> {
    let mut cfg = run_config(config)?;
    cfg.case = data.inner.case();
    cfg.validate().map_err(to_py)?;
    let configs = cfg.estimator_configs(data.inner.d_y()).map_err(to_py)?;
    configs
        .iter()
        .map(|c| {
            core_estimate(c, &data.inner)
                .map(|inner| PyEstimate { inner })
                .map_err(to_py)
        })
        .collect()
}

/// Plug-in variance bounds for the first estimator of the configuration.
#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn plugin_bounds(py: Python<'_>, data: &Dataset, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let mut cfg = run_config(config)?;
    cfg.case = data.inner.case();
    cfg.validate().map_err(to_py)?;
    let c = cfg
        .estimator_configs(data.inner.d_y())
        .map_err(to_py)?
        .into_iter()
        .next()
        .ok_or_else(|| to_py(Error::Config("no estimators configured".into())))?;
    let b = core_plugin_bounds(&c, &data.inner).map_err(to_py)?;
    to_py_json(py, &b)
}

/// Exact population quantities (parameter, Jacobian, variance bounds) for
/// a named process.
#[pyfunction]
#[pyo3(signature = (preset, case = "verify-out", moment = None))]
fn oracle(py: Python<'_>, preset: &str, case: &str, moment: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let mut cfg = default_simulation_config(preset, parse_case(case)?).map_err(to_py)?;
    if let Some(m) = moment {
        cfg.moment = from_py_json(m)?;
    }
    let dgp = cfg.dgp(None).map_err(to_py)?;
    let param = cfg.oracle_param(&dgp);
    let o = oracle_for(&dgp, &cfg.moment, param.as_ref()).map_err(to_py)?;
    to_py_json(py, &o)
}

/// Monte Carlo study. Without a config the preset's default line-up is used.
#[pyfunction]
#[pyo3(signature = (preset, n, reps, seed = 0, case = "verify-out", config = None, threads = None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    preset: &str,
    n: usize,
    reps: usize,
    seed: u64,
    case: &str,
    config: Option<&Bound<'_, PyAny>>,
    threads: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let case = parse_case(case)?;
    let mut cfg = match config {
        Some(c) => from_py_json::<RunConfig>(c)?,
        None => default_simulation_config(preset, case).map_err(to_py)?,
    };
    cfg.case = case;
    cfg.validate().map_err(to_py)?;
    let dgp = cfg.dgp(Some(preset)).map_err(to_py)?;
    let configs = cfg.estimator_configs(dgp.d_y()).map_err(to_py)?;
    let param = cfg.oracle_param(&dgp);
    let report = py
        .detach(|| run_monte_carlo(&dgp, &cfg.moment, &configs, n, reps, seed, param.as_ref(), threads))
        .map_err(to_py)?;
    to_py_json(py, &report)
}

#[pymodule]
fn pyauxgmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AuxgmmError", m.py().get_type::<AuxgmmError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(plugin_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
