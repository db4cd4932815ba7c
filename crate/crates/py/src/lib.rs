//! Python bindings: population models, synthetic data, the robust shrinkage
//! fit, the GLRT, the asymptotic theory, the shrinkage selector and the Monte
//! Carlo sweep (plans and results exchanged as JSON).

use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rtse::detector;
use rtse::estimators::{self, ScatterEstimate, ShrinkageParam, SolverConfig};
use rtse::linalg::{CMat, CVec};
use rtse::model::{self, CovarianceModel, Dataset, TextureModel};
use rtse::montecarlo::{self, TrialPlan};
use rtse::rmt::TheoryContext;
use rtse::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        Error::NonConvergence { .. } | Error::NotPositiveDefinite | Error::AllPointsFailed => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// `"unit"`, `"inverse-gamma:<shape>"`.
pub fn parse_texture(spec: &str) -> rtse::Result<TextureModel> {
    let spec = spec.trim();
    let texture = match spec.split_once(':') {
        None if spec == "unit" => TextureModel::Unit,
        Some(("inverse-gamma", shape)) => TextureModel::InverseGamma {
            shape: model::parse_f64(shape)?,
        },
        _ => return Err(Error::Parse(format!("unknown texture {spec:?}; use \"unit\" or \"inverse-gamma:<shape>\""))),
    };
    texture.validate()?;
    Ok(texture)
}

pub fn matrix_rows(m: &CMat) -> Vec<Vec<Complex64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `(rho, sigma_hat^2)`; `None` where the fit failed.
type GridValue = (f64, Option<f64>);

#[pyclass(name = "CovarianceModel", frozen)]
pub struct PyCovarianceModel {
    inner: CovarianceModel,
}

#[pymethods]
impl PyCovarianceModel {
    #[staticmethod]
    fn identity(dim: usize) -> PyResult<Self> {
        CovarianceModel::identity(dim).map(|inner| Self { inner }).map_err(to_py)
    }

    /// `[C]_ij = a^|i-j|`.
    #[staticmethod]
    fn toeplitz(coefficient: f64, dim: usize) -> PyResult<Self> {
        model::build_toeplitz_ar(coefficient, dim).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    fn matrix(&self) -> Vec<Vec<Complex64>> {
        matrix_rows(self.inner.matrix())
    }

    /// Limiting quantities for `c = N/n` and shrinkage `rho`, with the uniform steering vector.
    fn theory(&self, c: f64, rho: f64) -> PyResult<PyTheory> {
        let p = model::uniform_steering(self.inner.dim()).map_err(to_py)?;
        TheoryContext::evaluate(&self.inner, &p, c, rho).map(|inner| PyTheory { inner }).map_err(to_py)
    }

    #[pyo3(signature = (samples, seed, texture = "unit"))]
    fn sample(&self, samples: usize, seed: u64, texture: &str) -> PyResult<PyDataset> {
        let texture = parse_texture(texture).map_err(to_py)?;
        model::sample_dataset(&self.inner, samples, &texture, seed).map(|inner| PyDataset { inner }).map_err(to_py)
    }
}

#[pyclass(name = "Theory", frozen)]
pub struct PyTheory {
    inner: TheoryContext,
}

#[pymethods]
impl PyTheory {
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
    #[getter]
    fn rho_bar(&self) -> f64 {
        self.inner.rho_bar
    }
    #[getter]
    fn m(&self) -> f64 {
        self.inner.m
    }
    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    /// `P(sqrt(N) T > gamma)` in the limit.
    fn false_alarm(&self, gamma: f64) -> f64 {
        self.inner.false_alarm(gamma)
    }
}

#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Columns are observations: `samples[i]` is `x_i`.
    #[staticmethod]
    fn from_samples(samples: Vec<Vec<Complex64>>) -> PyResult<Self> {
        let n = samples.len();
        let dim = samples.first().map_or(0, Vec::len);
        if n == 0 || dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(PyValueError::new_err("need a non-empty list of equal-length observations"));
        }
        let m = CMat::from_fn(dim, n, |k, i| samples[i][k]);
        Dataset::new(m).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Dataset::read_csv(file).map(|inner| Self { inner }).map_err(to_py)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        self.inner.write_csv(file).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn samples(&self) -> Vec<Vec<Complex64>> {
        self.inner.samples().column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[pyo3(signature = (rho, tolerance = 1e-9, max_iterations = 500))]
    fn fit(&self, rho: f64, tolerance: f64, max_iterations: usize) -> PyResult<PyScatterEstimate> {
        let param = ShrinkageParam::for_dataset(rho, &self.inner).map_err(to_py)?;
        let cfg = SolverConfig { tolerance, max_iterations, ..SolverConfig::default() };
        estimators::robust_shrinkage_fit(&self.inner, param, &cfg).map(|inner| PyScatterEstimate { inner }).map_err(to_py)
    }

    /// `(rho_star, [(rho, sigma2_hat or None)])` with the uniform steering vector.
    fn select_rho_star(&self, grid: Vec<f64>) -> PyResult<(f64, Vec<GridValue>)> {
        let p = model::uniform_steering(self.inner.dim()).map_err(to_py)?;
        let r = detector::select_rho_star(&self.inner, &p, &grid, &SolverConfig::default()).map_err(to_py)?;
        Ok((r.rho_star, r.entries.iter().map(|e| (e.rho, e.sigma2_hat)).collect()))
    }
}

#[pyclass(name = "ScatterEstimate", frozen)]
pub struct PyScatterEstimate {
    inner: ScatterEstimate,
}

#[pymethods]
impl PyScatterEstimate {
    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho.rho
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations_used
    }
    #[getter]
    fn residual(&self) -> f64 {
        self.inner.final_residual
    }

    fn matrix(&self) -> Vec<Vec<Complex64>> {
        matrix_rows(self.inner.matrix())
    }

    fn rho_bar_hat(&self) -> f64 {
        detector::empirical_rho_bar(&self.inner)
    }

    /// Plug-in `sigma_hat^2` with the uniform steering vector, for `rho < 1`.
    fn sigma2_hat(&self, c: f64) -> PyResult<f64> {
        let p = model::uniform_steering(self.inner.dim()).map_err(to_py)?;
        let rb = detector::empirical_rho_bar(&self.inner);
        detector::empirical_sigma2(&self.inner, &p, rb, c).map_err(to_py)
    }

    /// GLRT statistic `T` of observation `y` for steering vector `p` (uniform when omitted).
    #[pyo3(signature = (y, p = None))]
    fn glrt(&self, y: Vec<Complex64>, p: Option<Vec<Complex64>>) -> PyResult<f64> {
        let steering = match p {
            Some(v) => model::SteeringVector::new(CVec::from_vec(v)),
            None => model::uniform_steering(self.inner.dim()),
        }
        .map_err(to_py)?;
        detector::glrt_statistic(&CVec::from_vec(y), &steering, &self.inner).map(|s| s.value).map_err(to_py)
    }
}

/// Runs a Monte Carlo plan given as JSON and returns the result as JSON.
pub fn far_sweep_json(plan: &str) -> rtse::Result<String> {
    let plan: TrialPlan = serde_json::from_str(plan).map_err(|e| Error::Parse(format!("plan: {e}")))?;
    let sweep = montecarlo::run_far_sweep(&plan)?;
    serde_json::to_string(&sweep).map_err(|e| Error::Parse(e.to_string()))
}

#[pyfunction]
fn far_sweep(py: Python<'_>, plan_json: &str) -> PyResult<String> {
    let plan = plan_json.to_owned();
    py.detach(move || far_sweep_json(&plan)).map_err(to_py)
}

#[pymodule]
fn rtse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCovarianceModel>()?;
    m.add_class::<PyTheory>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyScatterEstimate>()?;
    m.add_function(wrap_pyfunction!(far_sweep, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
