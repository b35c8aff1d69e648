//! Python module `bdgap`.
//!
//! Models and profiles are wrapped as classes; reports come back as plain
//! dicts built from their JSON form.

use bdgap_core::dynamics::{fit_decay_rate, perturbed_equilibrium, Observe};
use bdgap_core::spectral::{
    build_linearized, gap_bounds, hardy_bracket as core_hardy, numerical_gap as core_gap, quantity_b as core_b,
    spectral_report as core_report,
};
use bdgap_core::{self as core, Controls, Error, StateVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Attachment/detachment rate family.
#[pyclass(name = "CoefficientModel", module = "bdgap", frozen)]
struct PyModel(core::CoefficientModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (alpha, mu, zs = 1.0, q = 1.0))]
    fn power_law(alpha: f64, mu: f64, zs: f64, q: f64) -> PyResult<Self> {
        core::CoefficientModel::power_law(alpha, mu, zs, q).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (alpha, mu, zs = 1.0, sigma = 1.0))]
    fn surface_tension(alpha: f64, mu: f64, zs: f64, sigma: f64) -> PyResult<Self> {
        core::CoefficientModel::surface_tension(alpha, mu, zs, sigma).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    fn table(a: Vec<f64>, b: Vec<f64>) -> PyResult<Self> {
        core::CoefficientModel::table(a, b).map(PyModel).map_err(py_err)
    }

    /// `a_i = 1`, `b_i = 2`.
    #[staticmethod]
    fn geometric() -> Self {
        PyModel(core::CoefficientModel::geometric())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PyModel).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("model serialises")
    }

    fn a(&self, i: usize) -> PyResult<f64> {
        self.0.eval_coefficients(i).map(|c| c.0).map_err(py_err)
    }

    fn b(&self, i: usize) -> PyResult<f64> {
        self.0.eval_coefficients(i).map(|c| c.1).map_err(py_err)
    }

    fn log_detailed_balance(&self, n: usize) -> PyResult<Vec<f64>> {
        self.0.log_detailed_balance(n).map_err(py_err)
    }

    fn critical_monomer_density(&self) -> PyResult<f64> {
        self.0.critical_monomer_density().map_err(py_err)
    }

    #[pyo3(signature = (tol = 1e-12))]
    fn critical_mass(&self, tol: f64) -> PyResult<f64> {
        self.0.critical_mass(tol).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("CoefficientModel({})", self.to_json())
    }
}

/// Truncated equilibrium with its moments.
#[pyclass(name = "EquilibriumProfile", module = "bdgap", frozen)]
struct PyProfile(core::EquilibriumProfile);

#[pymethods]
impl PyProfile {
    #[new]
    #[pyo3(signature = (model, z, n, tol = 1e-12))]
    fn new(model: &PyModel, z: f64, n: usize, tol: f64) -> PyResult<Self> {
        core::equilibrium_profile(&model.0, z, n, tol).map(PyProfile).map_err(py_err)
    }

    #[getter]
    fn z(&self) -> f64 {
        self.0.z
    }
    #[getter]
    fn zs(&self) -> f64 {
        self.0.zs
    }
    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }
    #[getter]
    fn mass(&self) -> f64 {
        self.0.mass
    }
    #[getter]
    fn m2(&self) -> f64 {
        self.0.m2
    }
    #[getter]
    fn m3(&self) -> f64 {
        self.0.m3
    }
    #[getter]
    fn a_quantity(&self) -> f64 {
        self.0.a_quantity
    }
    #[getter]
    fn log_q(&self) -> Vec<f64> {
        self.0.log_q.clone()
    }

    fn q(&self, i: usize) -> PyResult<f64> {
        if i == 0 || i > self.0.n {
            return Err(PyValueError::new_err(format!("index {i} outside 1..={}", self.0.n)));
        }
        Ok(self.0.q(i))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("profile serialises")
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PyProfile).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("EquilibriumProfile(z={}, n={}, mass={})", self.0.z, self.0.n, self.0.mass)
    }
}

#[pyfunction]
#[pyo3(signature = (model, z, tol = 1e-12))]
fn mass_of_z(model: &PyModel, z: f64, tol: f64) -> PyResult<f64> {
    core::mass_of_z(&model.0, z, tol).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (model, mass, tol = 1e-12))]
fn z_of_mass(model: &PyModel, mass: f64, tol: f64) -> PyResult<f64> {
    core::z_of_mass(&model.0, mass, tol).map_err(py_err)
}

/// Right-hand side of the truncated equations at `c`.
#[pyfunction]
fn bd_rhs(model: &PyModel, c: Vec<f64>) -> PyResult<Vec<f64>> {
    let s = StateVector::new(c).map_err(py_err)?;
    Ok(core::bd_rhs(&model.0, &s))
}

#[pyfunction]
#[pyo3(signature = (profile, model, tol = 1e-10))]
fn quantity_b(profile: &PyProfile, model: &PyModel, tol: f64) -> PyResult<f64> {
    core_b(&profile.0, &model.0, tol).map(|b| b.value).map_err(py_err)
}

/// `(lambda_lo, lambda_hi)` from `B` and the profile moments.
#[pyfunction]
fn gap_bracket(profile: &PyProfile, model: &PyModel) -> PyResult<(f64, f64)> {
    let p = &profile.0;
    let b = core_b(p, &model.0, 1e-10).map_err(py_err)?;
    let g = gap_bounds(p, b.value, p.m2, p.m3).map_err(py_err)?;
    Ok((g.lo, g.hi))
}

/// Smallest nonzero decay rate of the linearised operator on the profile's truncation.
#[pyfunction]
#[pyo3(signature = (profile, model, tol = 1e-10))]
fn numerical_gap(profile: &PyProfile, model: &PyModel, tol: f64) -> PyResult<f64> {
    let m = build_linearized(&profile.0, &model.0, profile.0.n).map_err(py_err)?;
    core_gap(&m, tol).map(|g| g.value).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (profile, model, tol = 1e-10))]
fn spectral_report<'py>(py: Python<'py>, profile: &PyProfile, model: &PyModel, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let r = core_report(&profile.0, &model.0, tol).map_err(py_err)?;
    to_dict(py, &r)
}

#[pyfunction]
fn hardy_bracket<'py>(py: Python<'py>, mu: Vec<f64>, nu: Vec<f64>, kmax: usize) -> PyResult<Bound<'py, PyAny>> {
    let r = core_hardy(&mu, &nu, kmax).map_err(py_err)?;
    to_dict(py, &r)
}

/// Nonlinear run from a seeded perturbation of the profile.
///
/// Returns a dict of observable columns plus the fitted decay of the weighted l1 distance.
#[pyfunction]
#[pyo3(signature = (profile, model, t_end, epsilon = 0.1, seed = 0, eta = None, snapshot_every = 0.5))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    profile: &PyProfile,
    model: &PyModel,
    t_end: f64,
    epsilon: f64,
    seed: u64,
    eta: Option<f64>,
    snapshot_every: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = &profile.0;
    let eta = eta.unwrap_or(0.25 * (p.zs / p.z).ln());
    let (s0, _) = perturbed_equilibrium(p, epsilon, seed).map_err(py_err)?;
    let ctl = Controls {
        snapshot_every,
        ..Controls::default()
    };
    let obs = Observe { profile: p, nu: eta, eta };
    let tr = py
        .detach(|| core::integrate(&model.0, &s0, t_end, &ctl, Some(&obs)))
        .map_err(py_err)?;
    let rows = &tr.observables;
    let out = PyDict::new(py);
    out.set_item("t", rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
    out.set_item("mass", rows.iter().map(|r| r.mass).collect::<Vec<_>>())?;
    out.set_item("H", rows.iter().map(|r| r.h).collect::<Vec<_>>())?;
    out.set_item("Fz", rows.iter().map(|r| r.fz).collect::<Vec<_>>())?;
    out.set_item("D", rows.iter().map(|r| r.d).collect::<Vec<_>>())?;
    out.set_item("exp_moment", rows.iter().map(|r| r.exp_moment).collect::<Vec<_>>())?;
    out.set_item("l1_dist", rows.iter().map(|r| r.l1_dist).collect::<Vec<_>>())?;
    out.set_item("mass_drift", tr.mass_drift)?;
    out.set_item("final_state", tr.states.last().map(|s| s.c().to_vec()))?;
    let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.l1_dist)).collect();
    match fit_decay_rate(&series) {
        Ok(f) => out.set_item("fit", to_dict(py, &f)?)?,
        Err(_) => out.set_item("fit", py.None())?,
    }
    Ok(out)
}

#[pymodule]
fn bdgap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyProfile>()?;
    m.add_function(wrap_pyfunction!(mass_of_z, m)?)?;
    m.add_function(wrap_pyfunction!(z_of_mass, m)?)?;
    m.add_function(wrap_pyfunction!(bd_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(quantity_b, m)?)?;
    m.add_function(wrap_pyfunction!(gap_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(numerical_gap, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_report, m)?)?;
    m.add_function(wrap_pyfunction!(hardy_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
