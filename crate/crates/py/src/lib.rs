//! Python bindings for the `tdsls` synthesis library.
//!
//! Problems cross the boundary as JSON text in the same format the CLI
//! reads; results come back as plain dicts and lists.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use tdsls::error::Error;
use tdsls::model::{load_problem, to_json, OcpProblem};
use tdsls::oracle::{verify as run_verify, VerifyLevel};
use tdsls::simulate::{run_many, RunStatus, SimOptions};
use tdsls::synthesis::{solve_ocp, FilterMode, SynthesisOptions};

create_exception!(tdsls, InfeasibleError, PyException, "The OCP has no feasible solution.");
create_exception!(tdsls, SolverError, PyException, "The QP solver did not converge.");

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Infeasible(_) => InfeasibleError::new_err(err.to_string()),
        Error::SolverFailure(_) | Error::Qp(_) => SolverError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_filter(name: &str) -> PyResult<FilterMode> {
    match name {
        "full" => Ok(FilterMode::Full),
        "diag" => Ok(FilterMode::DiagOnly),
        "anchored" => Ok(FilterMode::Anchored),
        _ => Err(PyValueError::new_err(format!(
            "unknown filter `{name}` (expected full, diag or anchored)"
        ))),
    }
}

fn options(filter: &str, tol: Option<f64>) -> PyResult<SynthesisOptions> {
    let mut o = SynthesisOptions {
        filter: parse_filter(filter)?,
        ..SynthesisOptions::default()
    };
    if let Some(t) = tol {
        if !(t > 0.0) {
            return Err(PyValueError::new_err("tol must be positive"));
        }
        o.qp.tol_feas = t;
        o.qp.tol_opt = t;
    }
    Ok(o)
}

fn parse(problem: &str) -> PyResult<OcpProblem> {
    load_problem(problem).map_err(to_py_err)
}

fn rows(v: &[nalgebra::DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

/// Problem JSON for the truck-trailer example.
#[pyfunction]
fn truck_trailer() -> String {
    to_json(&tdsls::presets::truck_trailer())
}

/// Solves the robust OCP and returns the nominal plan and filter scales.
#[pyfunction]
#[pyo3(signature = (problem, filter = "full", tol = None))]
fn solve<'py>(py: Python<'py>, problem: &str, filter: &str, tol: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let p = parse(problem)?;
    let o = options(filter, tol)?;
    let r = py.detach(|| solve_ocp(&p, &o)).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("status", "optimal")?;
    out.set_item("objective", r.objective)?;
    out.set_item("u0", r.nominal_u.block(0).iter().copied().collect::<Vec<_>>())?;
    out.set_item("nominal_x", rows(&r.nominal_x.blocks()))?;
    out.set_item("nominal_u", rows(&r.nominal_u.blocks()))?;
    out.set_item("q", rows(&r.sigma.q))?;
    out.set_item("iterations", r.solver_stats.iterations)?;
    out.set_item("solve_time", r.solver_stats.solve_time)?;
    out.set_item("n_vars", r.solver_stats.n_vars)?;
    Ok(out)
}

/// Solves the problem and runs the oracle checks on the result.
#[pyfunction]
#[pyo3(signature = (problem, level = "fast", seed = 0, filter = "full"))]
fn verify<'py>(py: Python<'py>, problem: &str, level: &str, seed: u64, filter: &str) -> PyResult<Bound<'py, PyDict>> {
    let level = match level {
        "fast" => VerifyLevel::Fast,
        "exhaustive" => VerifyLevel::Exhaustive,
        _ => return Err(PyValueError::new_err(format!("unknown level `{level}`"))),
    };
    let p = parse(problem)?;
    let o = options(filter, None)?;
    let report = py
        .detach(|| solve_ocp(&p, &o).and_then(|r| run_verify(&p, &r, level, seed)))
        .map_err(to_py_err)?;
    let checks = PyList::empty(py);
    for c in &report.checks {
        let d = PyDict::new(py);
        d.set_item("name", &c.name)?;
        d.set_item("value", c.value)?;
        d.set_item("limit", c.limit)?;
        d.set_item("passed", c.passed)?;
        d.set_item("note", c.note.as_deref())?;
        checks.append(d)?;
    }
    let out = PyDict::new(py);
    out.set_item("passed", report.passed())?;
    out.set_item("checks", checks)?;
    Ok(out)
}

/// Receding-horizon Monte Carlo; returns per-run states, inputs and
/// violation counts.
#[pyfunction]
#[pyo3(signature = (problem, steps = 30, runs = 1, seed = 0, filter = "full"))]
fn simulate<'py>(
    py: Python<'py>,
    problem: &str,
    steps: usize,
    runs: usize,
    seed: u64,
    filter: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = parse(problem)?;
    let o = SimOptions {
        steps,
        seed,
        synthesis: options(filter, None)?,
        ..SimOptions::default()
    };
    let trajectories = py
        .detach(|| run_many(&p, &o, runs).into_iter().collect::<Result<Vec<_>, _>>())
        .map_err(to_py_err)?;
    let list = PyList::empty(py);
    let mut total = 0;
    for t in &trajectories {
        total += t.violations.len();
        let d = PyDict::new(py);
        let status = match t.status {
            RunStatus::Completed => "completed".to_owned(),
            RunStatus::Infeasible { step } => format!("infeasible at step {step}"),
            RunStatus::SolverFailure { step } => format!("solver failure at step {step}"),
        };
        d.set_item("status", status)?;
        d.set_item("states", rows(&t.states))?;
        d.set_item("inputs", rows(&t.inputs))?;
        d.set_item("violations", t.violations.len())?;
        list.append(d)?;
    }
    let out = PyDict::new(py);
    out.set_item("runs", list)?;
    out.set_item("total_violations", total)?;
    out.set_item(
        "completed_runs",
        trajectories.iter().filter(|t| t.is_complete()).count(),
    )?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "tdsls")]
pub fn tdsls_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    m.add_function(wrap_pyfunction!(truck_trailer, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
