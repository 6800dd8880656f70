//! Python bindings. States cross the boundary as lists of complex numbers and
//! reports as plain dicts.

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use qsphere_core::control::{self, GlobalSteerConfig};
use qsphere_core::dynamics::{propagate, MarkovStepper, NoisePath, PropagatorConfig};
use qsphere_core::ergodicity::{self, InitialLaw};
use qsphere_core::noise::{self, CoefficientLaw, NoiseBasis};
use qsphere_core::system::{check_condition2, DEFAULT_TOL_COUPLING, DEFAULT_TOL_GAP};
use qsphere_core::{galerkin, Cvec, Error};

create_exception!(qsphere, NumericalError, PyRuntimeError);

fn err(e: Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_cvec(z: Vec<Complex64>) -> Cvec {
    Cvec::from_vec(z)
}

fn from_cvec(z: &Cvec) -> Vec<Complex64> {
    z.iter().copied().collect()
}

fn to_dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn propagator(substeps: usize) -> PyResult<PropagatorConfig> {
    let cfg = PropagatorConfig::default().with_substeps(substeps);
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// The system `i z' = Lambda z + beta(t) B z + eps F(z)`.
#[pyclass(name = "System", module = "qsphere", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySystem(qsphere_core::SystemSpec);

#[pymethods]
impl PySystem {
    #[staticmethod]
    fn sys_a() -> Self {
        Self(qsphere_core::sys_a())
    }

    #[staticmethod]
    fn sys_b() -> Self {
        Self(qsphere_core::sys_b())
    }

    /// Galerkin truncation with potential `V`, e.g. `"x^2"`.
    #[staticmethod]
    #[pyo3(signature = (potential = "x^2", n = 3, sigma = 2.0, epsilon = 0.0))]
    fn galerkin(potential: &str, n: usize, sigma: f64, epsilon: f64) -> PyResult<Self> {
        let v: galerkin::PolynomialPotential =
            potential.parse().map_err(|e| PyValueError::new_err(format!("bad potential: {e}")))?;
        Ok(Self(galerkin::build(&v, n, sigma, epsilon).map_err(err)?.spec))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        qsphere_core::SystemSpec::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.0.epsilon()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.spectral().eigenvalues.clone()
    }

    /// Eigenvector `e_k`, 1-based.
    fn e(&self, k: usize) -> PyResult<Vec<Complex64>> {
        if k == 0 || k > self.0.dim() {
            return Err(PyValueError::new_err(format!("k must lie in 1..={}", self.0.dim())));
        }
        Ok(from_cvec(self.0.spectral().e(k - 1)))
    }

    fn with_epsilon(&self, epsilon: f64) -> Self {
        Self(self.0.with_epsilon(epsilon))
    }

    /// Spectral gap and coupling check as a dict.
    fn check<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &check_condition2(&self.0, DEFAULT_TOL_GAP, DEFAULT_TOL_COUPLING))
    }

    fn __repr__(&self) -> String {
        format!("System(n={}, eps={}, nonlinearity={})", self.0.dim(), self.0.epsilon(), self.0.nonlinearity().label())
    }
}

/// `eta(t) = sum_j b_j xi_j g_j(t)` on each unit interval.
#[pyclass(name = "NoiseModel", module = "qsphere", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNoiseModel(noise::NoiseModel);

#[pymethods]
impl PyNoiseModel {
    #[new]
    #[pyo3(signature = (b, dist = "standard_normal"))]
    fn new(b: Vec<f64>, dist: &str) -> PyResult<Self> {
        let law = match dist {
            "standard_normal" => CoefficientLaw::StandardNormal,
            "uniform_sym" => CoefficientLaw::UniformSym,
            other => return Err(PyValueError::new_err(format!("unknown law '{other}'"))),
        };
        noise::NoiseModel::new(b, law, NoiseBasis::Trig).map(Self).map_err(err)
    }

    /// `b_j = j^-2` for `j = 1..J`.
    #[staticmethod]
    #[pyo3(signature = (j = 8))]
    fn power_law(j: usize) -> Self {
        Self(noise::NoiseModel::power_law(j))
    }

    #[staticmethod]
    fn zero(j: usize) -> Self {
        Self(noise::NoiseModel::zero(j))
    }

    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.0.coefficients().to_vec()
    }

    #[getter]
    fn truncation(&self) -> usize {
        self.0.truncation()
    }

    /// `beta` on `[0, k)` sampled at `times` for the path drawn from `seed`.
    fn sample_path(&self, seed: u64, times: Vec<f64>) -> PyResult<Vec<f64>> {
        let k = times.iter().fold(0.0f64, |m, &t| m.max(t)).floor() as u64 + 1;
        let path: Vec<_> = (0..k).map(|i| noise::sample_segment(&self.0, &mut noise::segment_rng(seed, 0, i))).collect();
        times.iter().map(|&t| noise::beta_eval(&path, &self.0, t).map_err(err)).collect()
    }

    fn __repr__(&self) -> String {
        format!("NoiseModel(J={})", self.0.truncation())
    }
}

fn model_or_default(noise: Option<PyRef<'_, PyNoiseModel>>) -> noise::NoiseModel {
    noise.map_or_else(noise::NoiseModel::default, |m| m.0.clone())
}

/// Integrate `steps` unit intervals under the noise drawn from `seed`.
/// Returns `(times, states)` sampled once per unit.
#[pyfunction]
#[pyo3(signature = (system, z0, steps, seed, noise = None, substeps = 256))]
fn simulate(
    py: Python<'_>,
    system: &PySystem,
    z0: Vec<Complex64>,
    steps: usize,
    seed: u64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    substeps: usize,
) -> PyResult<(Vec<f64>, Vec<Vec<Complex64>>)> {
    if steps == 0 {
        return Err(PyValueError::new_err("steps must be at least 1"));
    }
    let model = model_or_default(noise);
    let mut cfg = propagator(substeps)?;
    cfg.record_stride = substeps;
    let z0 = to_cvec(z0);
    let spec = &system.0;
    let rec = py
        .detach(|| {
            let path: Vec<_> =
                (0..steps as u64).map(|k| noise::sample_segment(&model, &mut noise::segment_rng(seed, 0, k))).collect();
            propagate(spec, &z0, &NoisePath { path: &path, model: &model }, steps as f64, &cfg)
        })
        .map_err(err)?;
    Ok((rec.times, rec.states.iter().map(from_cvec).collect()))
}

/// Markov chain `z_0, ..., z_k` at integer times.
#[pyfunction]
#[pyo3(signature = (system, z0, steps, seed, noise = None, substeps = 256))]
fn chain(
    system: &PySystem,
    z0: Vec<Complex64>,
    steps: usize,
    seed: u64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    substeps: usize,
) -> PyResult<Vec<Vec<Complex64>>> {
    let model = model_or_default(noise);
    let stepper = MarkovStepper::new(&system.0, &model, propagator(substeps)?).map_err(err)?;
    let mut z = to_cvec(z0);
    let mut out = vec![from_cvec(&z)];
    for k in 0..steps as u64 {
        let seg = noise::sample_segment(&model, &mut noise::segment_rng(seed, 0, k));
        z = stepper.advance(&z, &seg).map_err(err)?;
        out.push(from_cvec(&z));
    }
    Ok(out)
}

/// Open-loop plan steering one point of the sphere to another.
#[pyclass(name = "SteeringPlan", module = "qsphere")]
struct PySteeringPlan(control::SteeringPlan);

#[pymethods]
impl PySteeringPlan {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        control::SteeringPlan::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn duration(&self) -> usize {
        self.0.duration()
    }

    #[getter]
    fn total_error(&self) -> f64 {
        self.0.total_error
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.stages.iter().map(|s| s.label.clone()).collect()
    }

    #[getter]
    fn start(&self) -> Vec<Complex64> {
        from_cvec(&self.0.start)
    }

    #[getter]
    fn target(&self) -> Vec<Complex64> {
        from_cvec(&self.0.target)
    }

    #[getter]
    fn diagnostics(&self) -> std::collections::BTreeMap<String, f64> {
        self.0.diagnostics.clone()
    }

    /// Endpoint of a fresh replay on `system`.
    #[pyo3(signature = (system, substeps = 256))]
    fn replay(&self, py: Python<'_>, system: &PySystem, substeps: usize) -> PyResult<Vec<Complex64>> {
        let cfg = propagator(substeps)?;
        let plan = &self.0;
        let ends = py.detach(|| plan.replay(&system.0, &cfg)).map_err(err)?;
        Ok(from_cvec(ends.last().unwrap_or(&self.0.start)))
    }

    fn __repr__(&self) -> String {
        format!(
            "SteeringPlan(stages={}, duration={}, error={:.3e})",
            self.0.stages.len(),
            self.0.duration(),
            self.0.total_error
        )
    }
}

/// Exact steering `z1 -> z2` for real systems with `eps = 0`.
#[pyfunction]
#[pyo3(signature = (system, z1, z2, delta = 0.03, tol = 1e-6, seed = 0))]
fn global_steer(
    py: Python<'_>,
    system: &PySystem,
    z1: Vec<Complex64>,
    z2: Vec<Complex64>,
    delta: f64,
    tol: f64,
    seed: u64,
) -> PyResult<PySteeringPlan> {
    let mut cfg = GlobalSteerConfig::default();
    cfg.approach.seed = seed;
    let (z1, z2) = (to_cvec(z1), to_cvec(z2));
    py.detach(|| control::global_steer(&system.0, &z1, &z2, delta, tol, &cfg))
        .map(PySteeringPlan)
        .map_err(err)
}

/// Voronoi cells of k-means centroids fitted to chain samples.
#[pyclass(name = "Partition", module = "qsphere", frozen)]
struct PyPartition(ergodicity::Partition);

#[pymethods]
impl PyPartition {
    #[staticmethod]
    #[pyo3(signature = (system, cells = 64, samples = 10_000, seed = 0, noise = None))]
    fn fit(
        py: Python<'_>,
        system: &PySystem,
        cells: usize,
        samples: usize,
        seed: u64,
        noise: Option<PyRef<'_, PyNoiseModel>>,
    ) -> PyResult<Self> {
        let model = model_or_default(noise);
        let cfg = PropagatorConfig::default();
        py.detach(|| ergodicity::make_partition(&system.0, &model, cells, samples, seed, &cfg))
            .map(Self)
            .map_err(err)
    }

    fn assign(&self, z: Vec<Complex64>) -> PyResult<usize> {
        let z = to_cvec(z);
        if z.len() != self.0.dim() {
            return Err(PyValueError::new_err(format!("state has n = {}, the partition n = {}", z.len(), self.0.dim())));
        }
        Ok(self.0.assign(&z))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// TV mixing between point masses at `z_a` and `z_b`; returns the report dict.
#[pyfunction]
#[pyo3(signature = (system, partition, z_a, z_b, k_max = 30, ensemble = 20_000, seed = 0, noise = None))]
#[allow(clippy::too_many_arguments)]
fn mixing<'py>(
    py: Python<'py>,
    system: &PySystem,
    partition: &PyPartition,
    z_a: Vec<Complex64>,
    z_b: Vec<Complex64>,
    k_max: usize,
    ensemble: usize,
    seed: u64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
) -> PyResult<Bound<'py, PyAny>> {
    let model = model_or_default(noise);
    let cfg = PropagatorConfig::default();
    let (a, b) = (InitialLaw::Point(to_cvec(z_a)), InitialLaw::Point(to_cvec(z_b)));
    let report = py
        .detach(|| ergodicity::mixing_experiment(&system.0, &model, &a, &b, k_max, ensemble, &partition.0, seed, &cfg))
        .map_err(err)?;
    to_dict(py, &report)
}

/// Hitting times of `B(e_1, delta)` from `z0`; returns the report dict.
#[pyfunction]
#[pyo3(signature = (system, z0, delta = 0.3, alpha = 0.05, k_max = 500, chains = 5000, seed = 0, noise = None))]
#[allow(clippy::too_many_arguments)]
fn hitting<'py>(
    py: Python<'py>,
    system: &PySystem,
    z0: Vec<Complex64>,
    delta: f64,
    alpha: f64,
    k_max: usize,
    chains: usize,
    seed: u64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
) -> PyResult<Bound<'py, PyAny>> {
    let model = model_or_default(noise);
    let cfg = PropagatorConfig::default();
    let z0 = to_cvec(z0);
    let report = py
        .detach(|| ergodicity::hitting_experiment(&system.0, &model, &z0, delta, alpha, k_max, chains, seed, &cfg))
        .map_err(err)?;
    to_dict(py, &report)
}

#[pymodule]
fn qsphere(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyNoiseModel>()?;
    m.add_class::<PySteeringPlan>()?;
    m.add_class::<PyPartition>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(chain, m)?)?;
    m.add_function(wrap_pyfunction!(global_steer, m)?)?;
    m.add_function(wrap_pyfunction!(mixing, m)?)?;
    m.add_function(wrap_pyfunction!(hitting, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
