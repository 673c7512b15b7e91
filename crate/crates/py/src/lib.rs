//! Python bindings. Reports come back as CSV text, logs as JSONL text.

use std::io::Cursor;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use copula_fusion::copula::CopulaModel;
use copula_fusion::design::{lr_rule, metrics_from_pmfs, write_trace, CostCoefficients};
use copula_fusion::harness::experiment::{run_design, run_estimate, run_rmse_experiment, run_roc_experiment, run_trace};
use copula_fusion::harness::{ExperimentReport, ScenarioConfig};
use copula_fusion::quantization::QuantizedHistogram;
use copula_fusion::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Experiment(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn csv(report: &ExperimentReport) -> PyResult<String> {
    report.csv_string().map_err(to_py)
}

/// Spearman's rho of the Clayton copula at `theta`.
#[pyfunction]
fn clayton_spearman_rho(theta: f64) -> PyResult<f64> {
    CopulaModel::clayton().spearman_rho(theta).map_err(to_py)
}

/// Clayton `theta` with the given Spearman's rho.
#[pyfunction]
fn clayton_theta_from_rho(rho: f64) -> PyResult<f64> {
    CopulaModel::clayton().theta_from_rho(rho).map_err(to_py)
}

/// Likelihood-ratio fusion rule for two outcome pmfs, as a list of decisions,
/// together with its `(p_false_alarm, p_detect, bayes_cost)`.
#[pyfunction]
#[pyo3(signature = (f0, f1, p0, c01 = 1.0, c10 = 2.0, c00 = 0.0, c11 = 0.0))]
fn fusion_rule(
    f0: Vec<f64>,
    f1: Vec<f64>,
    p0: f64,
    c01: f64,
    c10: f64,
    c00: f64,
    c11: f64,
) -> PyResult<(Vec<bool>, (f64, f64, f64))> {
    if f0.len() != f1.len() {
        return Err(PyValueError::new_err("pmfs differ in length"));
    }
    let costs = CostCoefficients::new(c00, c01, c10, c11).map_err(to_py)?;
    let rule = lr_rule(&f0, &f1, p0, &costs);
    let m = metrics_from_pmfs(&f0, &f1, &rule, p0, &costs);
    Ok((rule.decisions, (m.p_false_alarm, m.p_detect, m.bayes_cost)))
}

/// A validated scenario file.
#[pyclass(frozen)]
struct Scenario {
    cfg: ScenarioConfig,
}

impl Scenario {
    fn seeded(&self, seed: Option<u64>) -> ScenarioConfig {
        let mut cfg = self.cfg.clone();
        if let Some(s) = seed {
            cfg.monte_carlo.seed = s;
        }
        cfg
    }
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { cfg: ScenarioConfig::load(path).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, name = "<string>"))]
    fn from_toml(text: &str, name: &str) -> PyResult<Self> {
        Ok(Self { cfg: ScenarioConfig::from_toml_str(text, name).map_err(to_py)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.cfg.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.monte_carlo.seed
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    /// Names and true values of the free parameters.
    fn truth(&self) -> Vec<(String, f64)> {
        self.cfg.truth.free_names().into_iter().zip(self.cfg.truth.free_values()).collect()
    }

    /// One feedback run: `(summary_csv, trace_jsonl, histogram_jsonl)`.
    #[pyo3(signature = (seed = None))]
    fn trace(&self, py: Python<'_>, seed: Option<u64>) -> PyResult<(String, String, String)> {
        let cfg = self.seeded(seed);
        py.detach(|| {
            let t = run_trace(&cfg)?;
            let mut log = Vec::new();
            write_trace(&t.run, &mut log)?;
            let mut hist = Vec::new();
            t.run.histogram.write_jsonl(&mut hist)?;
            Ok((
                t.report.csv_string()?,
                String::from_utf8(log).expect("JSONL is UTF-8"),
                String::from_utf8(hist).expect("JSONL is UTF-8"),
            ))
        })
        .map_err(to_py)
    }

    /// MLE of the free parameters from histogram JSONL text.
    fn estimate(&self, py: Python<'_>, histogram_jsonl: &str) -> PyResult<String> {
        let hist = QuantizedHistogram::read_jsonl(Cursor::new(histogram_jsonl.as_bytes())).map_err(to_py)?;
        let report = py.detach(|| run_estimate(&self.cfg, &hist)).map_err(to_py)?;
        csv(&report)
    }

    fn design(&self, py: Python<'_>) -> PyResult<String> {
        let report = py.detach(|| run_design(&self.cfg)).map_err(to_py)?;
        csv(&report)
    }

    #[pyo3(signature = (replicates = None, seed = None))]
    fn rmse(&self, py: Python<'_>, replicates: Option<usize>, seed: Option<u64>) -> PyResult<String> {
        let mut cfg = self.seeded(seed);
        if let Some(r) = replicates {
            cfg.rmse.replicates = r;
        }
        let exp = py.detach(|| run_rmse_experiment(&cfg)).map_err(to_py)?;
        csv(&exp.report)
    }

    #[pyo3(signature = (replicates = None, seed = None))]
    fn roc(&self, py: Python<'_>, replicates: Option<usize>, seed: Option<u64>) -> PyResult<String> {
        let mut cfg = self.seeded(seed);
        if let Some(r) = replicates {
            cfg.roc.replicates = r;
        }
        let exp = py.detach(|| run_roc_experiment(&cfg)).map_err(to_py)?;
        csv(&exp.report)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={})", self.cfg.name, self.cfg.monte_carlo.seed)
    }
}

#[pymodule]
fn copula_fusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(clayton_spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(clayton_theta_from_rho, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_rule, m)?)?;
    m.add_class::<Scenario>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
