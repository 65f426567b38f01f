//! Closed-loop simulation of the true uncertain delay dynamics.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{OcpProblem, PolytopeSet, TimeDelaySystem, UncertaintyVertex};
use crate::synthesis::{solve_ocp, SolverStats, SynthesisOptions, SynthesisResult};

/// One step of the true dynamics.
///
/// `x_window` holds `x(k-na)..x(k)` and `u_window` holds `u(k-nb)..u(k)`,
/// both oldest first. `weights` selects the uncertainty as a convex
/// combination of the system's vertices.
pub fn step_dynamics(
    sys: &TimeDelaySystem,
    x_window: &[DVector<f64>],
    u_window: &[DVector<f64>],
    weights: &[f64],
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x_window.len() != sys.na + 1 || u_window.len() != sys.nb + 1 {
        return Err(dim_err(format!(
            "windows hold {} states and {} inputs, expected {} and {}",
            x_window.len(),
            u_window.len(),
            sys.na + 1,
            sys.nb + 1
        )));
    }
    if w.len() != sys.nx {
        return Err(dim_err("disturbance has the wrong dimension"));
    }
    let delta = UncertaintyVertex::combine(&sys.vertices, weights)?;
    let mut next = w.clone();
    for i in 0..=sys.na {
        let x = &x_window[sys.na - i];
        next += (&sys.a_nom[i] + &delta.d_a[i]) * x;
    }
    for j in 0..=sys.nb {
        let u = &u_window[sys.nb - j];
        next += (&sys.b_nom[j] + &delta.d_b[j]) * u;
    }
    Ok(next)
}

/// Symmetric Dirichlet(1) weights, i.e. a uniform point of the simplex.
pub fn sample_uncertainty<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    if m <= 1 {
        return vec![1.0; m];
    }
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Componentwise uniform draw from `[-σ_w, σ_w]`.
pub fn sample_disturbance<R: Rng + ?Sized>(nx: usize, sigma_w: f64, rng: &mut R) -> DVector<f64> {
    if sigma_w <= 0.0 {
        return DVector::zeros(nx);
    }
    let dist = Uniform::new_inclusive(-sigma_w, sigma_w).expect("finite bound");
    DVector::from_fn(nx, |_, _| dist.sample(rng))
}

/// Generator for run `run` of an experiment seeded with `seed`.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Re-solve at every step and apply the first nominal input.
    #[default]
    Receding,
    /// Solve once and roll the time-varying feedback over the horizon.
    OpenloopPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOptions {
    pub steps: usize,
    pub seed: u64,
    pub mode: PolicyMode,
    /// Hold one uncertainty draw for the whole run.
    pub freeze_uncertainty: bool,
    /// Constraint slack below `-slack_tol` is recorded as a violation.
    pub slack_tol: f64,
    pub synthesis: SynthesisOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            steps: 30,
            seed: 0,
            mode: PolicyMode::Receding,
            freeze_uncertainty: false,
            slack_tol: 1e-6,
            synthesis: SynthesisOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    State,
    Terminal,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub time: usize,
    pub kind: ConstraintKind,
    pub facet: usize,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSolve {
    pub objective: f64,
    pub stats: SolverStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The OCP at `step` had no feasible solution; the run stopped there.
    Infeasible {
        step: usize,
    },
    /// The solver gave up at `step`.
    SolverFailure {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub uncertainty_draws: Vec<Vec<f64>>,
    pub violations: Vec<ConstraintViolation>,
    pub per_step_solve: Vec<StepSolve>,
    pub status: RunStatus,
}

impl Trajectory {
    fn new(x0: DVector<f64>) -> Self {
        Self {
            states: vec![x0],
            inputs: Vec::new(),
            disturbances: Vec::new(),
            uncertainty_draws: Vec::new(),
            violations: Vec::new(),
            per_step_solve: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Smallest constraint slack seen during auditing.
    pub fn min_slack(&self, problem: &OcpProblem, mode: PolicyMode) -> f64 {
        let mut v = Vec::new();
        audit(problem, self, mode, f64::INFINITY, &mut v);
        v.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }
}

fn audit_set(
    set: &PolytopeSet,
    x: &DVector<f64>,
    time: usize,
    kind: ConstraintKind,
    tol: f64,
    out: &mut Vec<ConstraintViolation>,
) {
    for (facet, slack) in set.slacks(x).iter().enumerate() {
        if *slack < -tol {
            out.push(ConstraintViolation {
                time,
                kind,
                facet,
                slack: *slack,
            });
        }
    }
}

/// Checks every recorded state and input. With `tol = ∞` every facet is
/// reported, which [`Trajectory::min_slack`] uses.
fn audit(problem: &OcpProblem, traj: &Trajectory, mode: PolicyMode, tol: f64, out: &mut Vec<ConstraintViolation>) {
    let record_all = tol.is_infinite();
    let tol = if record_all { f64::NEG_INFINITY } else { tol };
    for (k, x) in traj.states.iter().enumerate() {
        let (set, kind) = match mode {
            PolicyMode::Receding => (Some(&problem.x_set), ConstraintKind::State),
            PolicyMode::OpenloopPolicy if k == problem.horizon => (problem.state_set_at(k), ConstraintKind::Terminal),
            PolicyMode::OpenloopPolicy => (problem.state_set_at(k), ConstraintKind::State),
        };
        if let Some(set) = set {
            audit_set(set, x, k, kind, tol, out);
        }
    }
    for (k, u) in traj.inputs.iter().enumerate() {
        audit_set(&problem.u_set, u, k, ConstraintKind::Input, tol, out);
    }
}

/// Applies `u_t = sum_{c ≤ t} K(t, c)(x_c - h_c)` against the given
/// per-step uncertainty weights and disturbances, starting from the
/// problem's history. Returns `x_0..x_n` and `u_0..u_{n-1}` with
/// `n = weights.len() ≤ T`.
pub fn rollout_policy(
    problem: &OcpProblem,
    result: &SynthesisResult,
    weights: &[Vec<f64>],
    disturbances: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let sys = &problem.system;
    let steps = weights.len();
    if steps > problem.horizon || disturbances.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "rollout of {steps} steps with {} disturbances over horizon {}",
            disturbances.len(),
            problem.horizon
        )));
    }
    let mut xs = problem.x_hist.clone();
    let mut us = problem.u_hist.clone();
    let mut xt = Vec::with_capacity(steps + 1);
    xt.push(problem.x0() - result.h.block(0));
    for t in 0..steps {
        let mut u = DVector::zeros(sys.nu);
        for (c, x_tilde) in xt.iter().enumerate() {
            if let Some(k) = result.controller_k.block(t, c) {
                u += k * x_tilde;
            }
        }
        us.push(u);
        let x_win = &xs[xs.len() - sys.na - 1..];
        let u_win = &us[us.len() - sys.nb - 1..];
        let next = step_dynamics(sys, x_win, u_win, &weights[t], &disturbances[t])?;
        xt.push(&next - result.h.block(t + 1));
        xs.push(next);
    }
    let states = xs.split_off(sys.na);
    let inputs = us.split_off(sys.nb);
    Ok((states, inputs))
}

fn record_failure(traj: &mut Trajectory, step: usize, err: Error) -> Result<()> {
    traj.status = match err {
        Error::Infeasible(_) => RunStatus::Infeasible { step },
        Error::SolverFailure(_) => RunStatus::SolverFailure { step },
        other => return Err(other),
    };
    Ok(())
}

/// Simulates one run. Each run draws from its own stream `run` of the
/// generator seeded with `options.seed`.
///
/// Solver infeasibility or failure ends the run early with the step index
/// in [`Trajectory::status`]; invalid input is an error.
pub fn run_closed_loop(problem: &OcpProblem, options: &SimOptions, run: u64) -> Result<Trajectory> {
    let sys = &problem.system;
    let mut rng = run_rng(options.seed, run);
    let mut traj = Trajectory::new(problem.x0().clone());
    let frozen = options
        .freeze_uncertainty
        .then(|| sample_uncertainty(sys.n_vertices(), &mut rng));
    let draw = |rng: &mut ChaCha8Rng| {
        let weights = frozen
            .clone()
            .unwrap_or_else(|| sample_uncertainty(sys.n_vertices(), rng));
        let w = sample_disturbance(sys.nx, sys.sigma_w, rng);
        (weights, w)
    };

    match options.mode {
        PolicyMode::Receding => {
            let mut xs = problem.x_hist.clone();
            let mut us = problem.u_hist.clone();
            for k in 0..options.steps {
                let x_hist = xs[xs.len() - sys.na - 1..].to_vec();
                let u_hist = us[us.len() - sys.nb..].to_vec();
                let result = match solve_ocp(&problem.with_history(x_hist, u_hist), &options.synthesis) {
                    Ok(r) => r,
                    Err(e) => {
                        record_failure(&mut traj, k, e)?;
                        break;
                    }
                };
                traj.per_step_solve.push(StepSolve {
                    objective: result.objective,
                    stats: result.solver_stats.clone(),
                });
                let u = result.nominal_u.block(0).into_owned();
                us.push(u.clone());
                let (weights, w) = draw(&mut rng);
                let next = step_dynamics(
                    sys,
                    &xs[xs.len() - sys.na - 1..],
                    &us[us.len() - sys.nb - 1..],
                    &weights,
                    &w,
                )?;
                xs.push(next.clone());
                traj.inputs.push(u);
                traj.disturbances.push(w);
                traj.uncertainty_draws.push(weights);
                traj.states.push(next);
            }
        }
        PolicyMode::OpenloopPolicy => match solve_ocp(problem, &options.synthesis) {
            Ok(result) => {
                traj.per_step_solve.push(StepSolve {
                    objective: result.objective,
                    stats: result.solver_stats.clone(),
                });
                let steps = options.steps.min(problem.horizon);
                let (weights, ws): (Vec<_>, Vec<_>) = (0..steps).map(|_| draw(&mut rng)).unzip();
                let (states, inputs) = rollout_policy(problem, &result, &weights, &ws)?;
                traj.states = states;
                traj.inputs = inputs;
                traj.disturbances = ws;
                traj.uncertainty_draws = weights;
            }
            Err(e) => record_failure(&mut traj, 0, e)?,
        },
    }
    let mut violations = Vec::new();
    audit(problem, &traj, options.mode, options.slack_tol, &mut violations);
    traj.violations = violations;
    Ok(traj)
}

/// Runs `runs` independent simulations on the current rayon pool; results
/// are in run order.
pub fn run_many(problem: &OcpProblem, options: &SimOptions, runs: usize) -> Vec<Result<Trajectory>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|run| run_closed_loop(problem, options, run))
        .collect()
}

/// Trajectory as CSV: one row per recorded state, with the input and
/// disturbance applied at that step (blank after the last one).
pub fn trajectory_csv(traj: &Trajectory, header: Option<&str>) -> String {
    let nx = traj.states.first().map_or(0, |x| x.len());
    let nu = traj.inputs.first().map_or(0, |u| u.len());
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(h);
        out.push('\n');
    }
    let mut cols = vec!["k".to_string()];
    cols.extend((1..=nx).map(|i| format!("x_{i}")));
    cols.extend((1..=nu).map(|i| format!("u_{i}")));
    cols.extend((1..=nx).map(|i| format!("w_{i}")));
    cols.push("feasible".into());
    cols.push("n_violations".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    let failed_at = match traj.status {
        RunStatus::Completed => None,
        RunStatus::Infeasible { step } | RunStatus::SolverFailure { step } => Some(step),
    };
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match traj.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), nu)),
        }
        match traj.disturbances.get(k) {
            Some(w) => row.extend(w.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), nx)),
        }
        row.push((failed_at != Some(k)).to_string());
        row.push(traj.violations.iter().filter(|v| v.time == k).count().to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
