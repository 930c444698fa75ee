//! Python bindings: posteriors, the KL dual, single solves and the newsvendor
//! experiment. Structured values cross the boundary as dicts or JSON strings.

use drobas::bench::{self, Method, NewsvendorConfig};
use drobas::duals::{self, LossSpec};
use drobas::solver::{FeasibleSet, SolveConfig};
use drobas::{ConjugatePosterior, DroError, Family, NiwParams, Samples, SamplingModel, StandardParams};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: DroError) -> PyErr {
    match e {
        DroError::Numerical(_) | DroError::InfiniteNormalizer(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Accept a flat list of scalars or a list of rows.
fn to_samples(data: &Bound<'_, PyAny>) -> PyResult<Samples> {
    if let Ok(v) = data.extract::<Vec<f64>>() {
        return Ok(Samples::from_scalars(&v));
    }
    let rows: Vec<Vec<f64>> = data
        .extract()
        .map_err(|_| PyValueError::new_err("data must be a list of floats or a list of rows"))?;
    Samples::from_rows(&rows).map_err(py_err)
}

fn rows(s: &Samples) -> Vec<Vec<f64>> {
    s.rows().map(|r| r.to_vec()).collect()
}

fn parse_family(name: &str) -> PyResult<Family> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "normalgamma" => Ok(Family::NormalGamma),
        "gammaexponential" | "gamma" | "exponential" => Ok(Family::GammaExponential),
        "normalinversewishart" | "niw" => Ok(Family::NormalInverseWishart),
        _ => Err(PyValueError::new_err(format!("unknown family '{name}'"))),
    }
}

/// Conjugate prior or posterior for one exponential family.
#[pyclass(name = "Posterior", module = "pydrobas", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPosterior {
    inner: ConjugatePosterior,
}

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    fn normal_gamma(mu: f64, kappa: f64, alpha: f64, beta: f64) -> PyResult<Self> {
        let inner = ConjugatePosterior::normal_gamma(mu, kappa, alpha, beta).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn gamma_exponential(alpha: f64, beta: f64) -> PyResult<Self> {
        let inner = ConjugatePosterior::gamma_exponential(alpha, beta).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn normal_inverse_wishart(mu: Vec<f64>, kappa: f64, iota: f64, psi: Vec<Vec<f64>>) -> PyResult<Self> {
        let d = mu.len();
        if psi.len() != d || psi.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("psi must be a D×D matrix matching mu"));
        }
        let psi = DMatrix::from_fn(d, d, |i, j| psi[i][j]);
        let p = NiwParams::new(DVector::from_vec(mu), kappa, iota, psi).map_err(py_err)?;
        let inner = ConjugatePosterior::normal_inverse_wishart(p).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Default weakly-informative prior for `family` in dimension `dim`.
    #[staticmethod]
    #[pyo3(signature = (family, dim = 1))]
    fn default_prior(family: &str, dim: usize) -> PyResult<Self> {
        let family = parse_family(family)?;
        if dim == 0 || (dim > 1 && family != Family::NormalInverseWishart) {
            return Err(PyValueError::new_err("dim must be 1, or >= 1 for the NIW family"));
        }
        Ok(Self {
            inner: ConjugatePosterior::default_prior(family, dim),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(json_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("posteriors serialise")
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs
    }

    /// Posterior after observing `data`.
    fn update(&self, data: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner = self.inner.update(&to_samples(data)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn gap(&self) -> PyResult<f64> {
        self.inner.gap().map_err(py_err)
    }

    fn eps_min(&self) -> PyResult<f64> {
        self.inner.eps_min().map_err(py_err)
    }

    /// `truth` is a JSON object such as `{"kind": "exponential", "rate": 0.05}`.
    fn eps_star_pe(&self, truth: &str) -> PyResult<f64> {
        let t: StandardParams = serde_json::from_str(truth).map_err(json_err)?;
        self.inner.eps_star_pe(&t).map_err(py_err)
    }

    fn eps_star_pe_plugin(&self, data: &Bound<'_, PyAny>) -> PyResult<f64> {
        self.inner.eps_star_pe_plugin(&to_samples(data)?).map_err(py_err)
    }

    /// Nominal likelihood parameters as JSON.
    fn nominal(&self) -> PyResult<String> {
        let n = self.inner.nominal().map_err(py_err)?;
        Ok(serde_json::to_string(&n.params).expect("parameters serialise"))
    }

    #[pyo3(signature = (count, seed = 0))]
    fn sample_nominal(&self, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let n = self.inner.nominal().map_err(py_err)?;
        Ok(rows(&n.sample(count, &mut ChaCha8Rng::seed_from_u64(seed))))
    }

    #[pyo3(signature = (count, seed = 0))]
    fn sample_predictive(&self, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let p = self.inner.predictive().map_err(py_err)?;
        Ok(rows(&p.sample(count, &mut ChaCha8Rng::seed_from_u64(seed))))
    }

    fn __repr__(&self) -> String {
        format!("Posterior({})", self.to_json())
    }
}

/// γ ln Σ exp(v/γ), exactly max(v) for γ ≤ 1e-10.
#[pyfunction]
fn perspective_lse(gamma: f64, values: Vec<f64>) -> f64 {
    duals::perspective_lse(gamma, &values)
}

/// Minimise the KL dual over γ for fixed loss values.
#[pyfunction]
fn solve_inner<'py>(py: Python<'py>, eps_eff: f64, losses: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = duals::solve_inner(eps_eff, &losses).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("gamma_star", s.gamma_star)?;
    d.set_item("value", s.value)?;
    d.set_item("weights", s.weights)?;
    Ok(d)
}

#[pyfunction]
fn project_simplex(y: Vec<f64>) -> Vec<f64> {
    drobas::solver::project_simplex(&y)
}

/// Worst-case risk of ξᵀx over a KL ball around N(mu, sigma).
#[pyfunction]
fn closed_form_gaussian_linear(mu: Vec<f64>, sigma: Vec<Vec<f64>>, eps_eff: f64, x: Vec<f64>) -> PyResult<f64> {
    let d = mu.len();
    if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("sigma must be a D×D matrix matching mu"));
    }
    let s = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
    duals::closed_form_gaussian_linear(&DVector::from_vec(mu), &s, eps_eff, &x).map_err(py_err)
}

#[pyfunction]
fn pareto_mask(points: Vec<(f64, f64)>) -> Vec<bool> {
    bench::pareto_mask(&points)
}

/// One solve. `method` is one of DRO-BAS-PE, DRO-BAS-PP, BDRO, KL-DRO, W-DRO;
/// `loss` is "newsvendor" (box [lower, upper]^D) or "portfolio" (simplex).
/// Returns the solution as a dict, or None when ε is below the PE minimum.
#[pyfunction]
#[pyo3(signature = (posterior, epsilon, method = "DRO-BAS-PP", m = 1000, loss = "newsvendor", h = 3.0, b = 8.0, lower = 0.0, upper = 100.0, data = None, seed = 0, solver_json = None))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    posterior: &PyPosterior,
    epsilon: f64,
    method: &str,
    m: usize,
    loss: &str,
    h: f64,
    b: f64,
    lower: f64,
    upper: f64,
    data: Option<&Bound<'py, PyAny>>,
    seed: u64,
    solver_json: Option<&str>,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let method: Method = method.parse().map_err(py_err)?;
    let dim = posterior.inner.dim();
    let (loss, set) = match loss {
        "newsvendor" => (LossSpec::Newsvendor { h, b }, FeasibleSet::cube(dim, lower, upper)),
        "portfolio" => (LossSpec::LinearPortfolio, FeasibleSet::simplex(dim)),
        other => return Err(PyValueError::new_err(format!("unknown loss '{other}'"))),
    };
    loss.validate().map_err(py_err)?;
    let train = match data {
        Some(d) => to_samples(d)?,
        None => Samples::with_capacity(dim, 0),
    };
    let solver: SolveConfig = match solver_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => SolveConfig::default(),
    };
    let ctx = bench::SolveContext {
        posterior: &posterior.inner,
        train: &train,
        loss,
        set: &set,
        m,
        solver: &solver,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sol = py
        .detach(|| bench::solve_method(method, &ctx, epsilon, &mut rng))
        .map_err(py_err)?;
    let Some(sol) = sol else { return Ok(None) };
    let d = PyDict::new(py);
    d.set_item("x_star", sol.x_star)?;
    d.set_item("gamma_star", sol.gamma_star)?;
    d.set_item("objective", sol.objective)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("converged", sol.converged)?;
    d.set_item("solve_time_s", sol.solve_time_s)?;
    d.set_item("sample_time_s", sol.sample_time_s)?;
    Ok(Some(d))
}

/// The standard newsvendor configuration as JSON, for editing.
#[pyfunction]
fn newsvendor_default_config() -> String {
    serde_json::to_string_pretty(&NewsvendorConfig::standard()).expect("configs serialise")
}

/// Run the newsvendor experiment; returns (results CSV, summary CSV).
#[pyfunction]
#[pyo3(signature = (config_json, threads = None))]
fn run_newsvendor(py: Python<'_>, config_json: &str, threads: Option<usize>) -> PyResult<(String, String)> {
    let cfg: NewsvendorConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let records = py
        .detach(|| bench::with_threads(threads, || bench::run_newsvendor(&cfg)))
        .map_err(py_err)?
        .map_err(py_err)?;
    let mut results = Vec::new();
    bench::write_results_csv(&mut results, &records).map_err(py_err)?;
    let mut summary = Vec::new();
    bench::write_summary_csv(&mut summary, &bench::oos_summary(&records).map_err(py_err)?).map_err(py_err)?;
    Ok((
        String::from_utf8(results).expect("CSV is UTF-8"),
        String::from_utf8(summary).expect("CSV is UTF-8"),
    ))
}

#[pymodule]
fn pydrobas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(perspective_lse, m)?)?;
    m.add_function(wrap_pyfunction!(solve_inner, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_gaussian_linear, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_mask, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(newsvendor_default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_newsvendor, m)?)?;
    Ok(())
}
