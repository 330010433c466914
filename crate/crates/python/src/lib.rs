//! Python module `uedqt_py`.

use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use uedqt::angular;
use uedqt::config::PipelineConfig;
use uedqt::iterative::{self, PartialTraceTargets};
use uedqt::pipeline;
use uedqt::rotor::{self, AngularDistribution, RotationalDensityMatrix};
use uedqt::vibrational::{self, OscillatorBasis, VibrationalDensityMatrix};
use uedqt::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Pipeline configuration; the default is the N2 benchmark.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml_text=None))]
    fn new(toml_text: Option<&str>) -> PyResult<Self> {
        let inner = match toml_text {
            Some(t) => PipelineConfig::from_toml(t).map_err(to_py)?,
            None => PipelineConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn j_max(&self) -> usize {
        self.inner.rotor.j_max
    }

    #[getter]
    fn temperature_k(&self) -> f64 {
        self.inner.rotor.temperature_k
    }
}

#[pyclass(name = "RotationalDensity", from_py_object)]
#[derive(Clone)]
struct PyRotationalDensity {
    inner: RotationalDensityMatrix,
}

#[pymethods]
impl PyRotationalDensity {
    /// Thermal populations on the diagonal.
    #[staticmethod]
    fn diagonal(weights: Vec<f64>) -> Self {
        PyRotationalDensity {
            inner: RotationalDensityMatrix::diagonal(&weights),
        }
    }

    #[getter]
    fn j_max(&self) -> usize {
        self.inner.j_max
    }

    fn trace(&self) -> f64 {
        self.inner.trace().re
    }

    fn element(&self, j1: usize, j2: usize, m: i32) -> Complex64 {
        self.inner.element(j1, j2, m)
    }

    fn cos2(&self) -> f64 {
        rotor::expectation_cos2(&self.inner)
    }

    fn min_eigenvalue(&self) -> f64 {
        self.inner.min_eigenvalue()
    }

    fn relative_error(&self, reference: &PyRotationalDensity) -> PyResult<f64> {
        iterative::density_error(&self.inner, &reference.inner).map_err(to_py)
    }
}

/// Angular distribution on a Gauss-Legendre polar grid.
#[pyclass(name = "AngularDistribution", from_py_object)]
#[derive(Clone)]
struct PyDistribution {
    inner: AngularDistribution,
}

#[pymethods]
impl PyDistribution {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.time_nodes.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.grid.theta.clone()
    }

    fn frame(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.inner.n_times() {
            return Err(PyValueError::new_err(format!("frame {k} of {}", self.inner.n_times())));
        }
        Ok(self.inner.frame(k).to_vec())
    }
}

/// Ground-truth density of the configured rotational benchmark.
#[pyfunction]
fn rotational_truth(config: &PyConfig) -> PyResult<PyRotationalDensity> {
    let (rho, _, _) = pipeline::rotational_truth(&config.inner).map_err(to_py)?;
    Ok(PyRotationalDensity { inner: rho })
}

/// `Pr(θ, t)` of `rho` over one revival period on the tomography grid.
#[pyfunction]
fn synthesize_probability(rho: &PyRotationalDensity, config: &PyConfig) -> PyResult<PyDistribution> {
    let cfg = &config.inner;
    let spec = cfg.rotor_spec().map_err(to_py)?;
    let grid = cfg.qt_grid().map_err(to_py)?;
    let times = rotor::period_time_nodes(&spec, cfg.grid.start_ps, cfg.time_samples());
    let pr = rotor::synthesize_probability(&rho.inner, &spec, &grid, &times).map_err(to_py)?;
    Ok(PyDistribution { inner: pr })
}

/// Iterative rotational tomography. Returns the reconstruction and the
/// `(iteration, eps_rho, eps_pr)` history.
#[pyfunction]
#[pyo3(signature = (measured, config, reference=None))]
fn qt_rot(
    measured: &PyDistribution,
    config: &PyConfig,
    reference: Option<&PyRotationalDensity>,
) -> PyResult<(PyRotationalDensity, Vec<(usize, f64, f64)>)> {
    let cfg = &config.inner;
    let spec = cfg.rotor_spec().map_err(to_py)?;
    let weights = rotor::thermal_weights(&spec, cfg.rotor.j_max, cfg.rotor.max_thermal_tail).map_err(to_py)?;
    let mut qc = cfg.qt_config();
    if cfg.qt.thermal_partial_traces {
        qc.constraints.partial_traces = Some(PartialTraceTargets::from_weights(&weights));
    }
    let initial = RotationalDensityMatrix::diagonal(&weights.weights);
    let out =
        iterative::qt_iterate(&initial, &measured.inner, &spec, &qc, reference.map(|r| &r.inner)).map_err(to_py)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.iteration, r.error_rho, r.error_pr))
        .collect();
    Ok((PyRotationalDensity { inner: out.state.rho }, history))
}

#[pyclass(name = "VibrationalDensity", from_py_object)]
#[derive(Clone)]
struct PyVibrationalDensity {
    inner: VibrationalDensityMatrix,
}

#[pymethods]
impl PyVibrationalDensity {
    #[staticmethod]
    fn random(dim: usize, rank: usize, seed: u64) -> Self {
        PyVibrationalDensity {
            inner: vibrational::random_vibrational_density(dim, rank, seed),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn element(&self, row: usize, col: usize) -> PyResult<Complex64> {
        if row >= self.inner.dim() || col >= self.inner.dim() {
            return Err(PyValueError::new_err("index outside the basis"));
        }
        Ok(self.inner.matrix[(row, col)])
    }

    fn trace(&self) -> f64 {
        self.inner.trace().re
    }

    fn relative_error(&self, reference: &PyVibrationalDensity) -> PyResult<f64> {
        vibrational::vib_density_error(&self.inner, &reference.inner).map_err(to_py)
    }
}

fn basis_of(config: &PyConfig) -> PyResult<OscillatorBasis> {
    config.inner.oscillator_basis().map_err(to_py)
}

/// Simulated position-probability movie of `rho`, `(times, values)` with
/// `values[t * points + p]`.
#[pyfunction]
fn vibrational_movie(rho: &PyVibrationalDensity, config: &PyConfig) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let basis = basis_of(config)?;
    let times = basis.time_nodes(config.inner.vib_time_samples(&basis));
    let m = vibrational::synthesize_measurement(&rho.inner, &basis, &times).map_err(to_py)?;
    Ok((m.time_nodes, m.values))
}

/// Iterative vibrational tomography from a random seeded guess.
#[pyfunction]
#[pyo3(signature = (times, values, config, reference=None))]
fn qt_vib(
    times: Vec<f64>,
    values: Vec<f64>,
    config: &PyConfig,
    reference: Option<&PyVibrationalDensity>,
) -> PyResult<(PyVibrationalDensity, Vec<(usize, f64, f64)>)> {
    let basis = basis_of(config)?;
    let movie = vibrational::VibrationalMeasurement {
        time_nodes: times,
        values,
    };
    let initial = vibrational::random_vibrational_density(basis.dim(), basis.dim(), config.inner.seed);
    let out = vibrational::iterative_vib_qt(
        &initial,
        &movie,
        &basis,
        &config.inner.vib_qt_config(),
        reference.map(|r| &r.inner),
    )
    .map_err(to_py)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.iteration, r.error_rho, r.error_pr))
        .collect();
    Ok((PyVibrationalDensity { inner: out.rho }, history))
}

#[pyfunction]
fn normalized_legendre(j: usize, m: i32, x: f64) -> f64 {
    angular::normalized_legendre(j, m, x)
}

#[pyfunction]
fn clebsch_gordan(j1: i64, m1: i64, j2: i64, m2: i64, j: i64, m: i64) -> f64 {
    angular::clebsch_gordan(j1, m1, j2, m2, j, m)
}

#[pyfunction]
fn pattern_function(m: usize, n: usize, grid: Vec<f64>) -> PyResult<Vec<f64>> {
    vibrational::pattern_function(m, n, &grid).map_err(to_py)
}

/// Tikhonov solution of `kernel · x = frame`; `kernel` is a list of rows.
#[pyfunction]
fn tikhonov_solve(kernel: Vec<Vec<f64>>, frame: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let rows = kernel.len();
    let cols = kernel.first().map_or(0, |r| r.len());
    if kernel.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged kernel rows"));
    }
    let k = nalgebra::DMatrix::from_fn(rows, cols, |i, j| kernel[i][j]);
    let solver = uedqt::inversion::TikhonovSolver::new(&k, lam, Default::default()).map_err(to_py)?;
    Ok(solver.solve(&frame).map_err(to_py)?.as_slice().to_vec())
}

#[pymodule]
fn uedqt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRotationalDensity>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyVibrationalDensity>()?;
    m.add_function(wrap_pyfunction!(rotational_truth, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_probability, m)?)?;
    m.add_function(wrap_pyfunction!(qt_rot, m)?)?;
    m.add_function(wrap_pyfunction!(vibrational_movie, m)?)?;
    m.add_function(wrap_pyfunction!(qt_vib, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_legendre, m)?)?;
    m.add_function(wrap_pyfunction!(clebsch_gordan, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_function, m)?)?;
    m.add_function(wrap_pyfunction!(tikhonov_solve, m)?)?;
    Ok(())
}
