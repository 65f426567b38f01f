//! Robust OCP synthesis: variable layout, constraint generation, the QP
//! solve and recovery of the closed-loop maps and controller.

mod assemble;
mod layout;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use assemble::{
    affine_constraint_rows, assemble_c_and_v, filter_floor, nominal_cost, overapprox_constraints, state_weights,
    tighten_constraints, CostMode, CvMaps, LinExpr, QpBuilder, QuadCost,
};
pub use layout::{layout_variables, AuxTag, FilterMode, VarTag, VariableLayout};

use crate::blockops::{
    build_delta_blocks, build_nominal_blocks, compute_offset, stack_history, BltMatrix, StackedSignal,
};
use crate::error::{Error, Result};
use crate::model::{validate, OcpProblem};
use crate::qp::{BundledBackend, QpBackend, QpSettings, QpSolution, QpStatus, StandardQp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub filter: FilterMode,
    pub cost: CostMode,
    /// Floor on the filter scales `q_t`.
    pub q_min: f64,
    pub qp: QpSettings,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            filter: FilterMode::Full,
            cost: CostMode::PerTime,
            q_min: 1e-8,
            qp: QpSettings::default(),
        }
    }
}

/// The assembled QP together with everything needed to interpret it.
#[derive(Debug, Clone)]
pub struct AssembledQp {
    pub layout: VariableLayout,
    pub qp: StandardQp,
    pub aux_tags: Vec<AuxTag>,
    pub cost_constant: f64,
    pub h: StackedSignal,
    pub assemble_time: f64,
}

impl AssembledQp {
    pub fn tag(&self, idx: usize) -> VarTag {
        self.layout
            .tag(idx)
            .unwrap_or_else(|| VarTag::Aux(self.aux_tags[idx - self.layout.n_core]))
    }
}

pub fn assemble(problem: &OcpProblem, options: &SynthesisOptions) -> Result<AssembledQp> {
    let start = Instant::now();
    let sys = &problem.system;
    let horizon = problem.horizon;
    let layout = layout_variables(sys.nx, sys.nu, horizon, options.filter);
    let nominal = build_nominal_blocks(sys, horizon)?;
    let (_, h) = compute_offset(sys, horizon, &problem.x_hist, &problem.u_hist)?;
    let (x_minus, u_minus) = stack_history(sys, &problem.x_hist, &problem.u_hist)?;
    let x0 = problem.x0();

    let maps = sys
        .vertices
        .par_iter()
        .map(|v| {
            let delta = build_delta_blocks(v, sys.nx, sys.nu, horizon)?;
            assemble_c_and_v(&layout, &delta, &h, &x_minus, &u_minus, x0)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut builder = QpBuilder::new(&layout);
    affine_constraint_rows(&layout, &nominal, &mut builder);
    filter_floor(&layout, options.q_min, &mut builder);
    for (l, m) in maps.iter().enumerate() {
        overapprox_constraints(&layout, m, l, sys.sigma_w, &mut builder);
    }
    tighten_constraints(&layout, problem, &h, &mut builder);
    let cost = nominal_cost(&layout, problem, &h, options.cost);
    let aux_tags = builder.aux_tags.clone();
    let qp = builder.finish(&cost);
    Ok(AssembledQp {
        layout,
        qp,
        aux_tags,
        cost_constant: cost.constant,
        h,
        assemble_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    pub assemble_time: f64,
    pub solve_time: f64,
    pub n_vars: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl SolverStats {
    fn new(asm: &AssembledQp, sol: &QpSolution) -> Self {
        Self {
            status: sol.status,
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
            assemble_time: asm.assemble_time,
            solve_time: sol.wall_time,
            n_vars: asm.qp.n_vars(),
            n_eq: asm.qp.n_eq(),
            n_ineq: asm.qp.n_ineq(),
        }
    }
}

/// The disturbance filter `Σ`: `Σ(0,0) = I`, `Σ(t+1,t+1) = diag(q_t)` and,
/// in full mode, free strictly-lower blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub q: Vec<DVector<f64>>,
    pub sub: Option<BltMatrix>,
}

impl Filter {
    pub fn to_blt(&self) -> BltMatrix {
        let horizon = self.q.len();
        let nx = self.q.first().map_or(0, |q| q.len());
        let mut s = match &self.sub {
            Some(sub) => sub.clone(),
            None => BltMatrix::zeros(horizon, nx, nx),
        };
        s.set_block(0, 0, DMatrix::identity(nx, nx)).expect("diagonal block");
        for (t, q) in self.q.iter().enumerate() {
            s.set_block(t + 1, t + 1, DMatrix::from_diagonal(q))
                .expect("diagonal block");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub phi_x: BltMatrix,
    pub phi_u: BltMatrix,
    pub sigma: Filter,
    pub h: StackedSignal,
    pub controller_k: BltMatrix,
    pub nominal_x: StackedSignal,
    pub nominal_u: StackedSignal,
    /// Optimal nominal cost including the constant terms from `h`.
    pub objective: f64,
    pub solver_stats: SolverStats,
    /// Raw solver output over the assembled variables.
    pub z: Vec<f64>,
}

pub fn solve_ocp(problem: &OcpProblem, options: &SynthesisOptions) -> Result<SynthesisResult> {
    solve_ocp_with(problem, options, &BundledBackend)
}

pub fn solve_ocp_with(
    problem: &OcpProblem,
    options: &SynthesisOptions,
    backend: &dyn QpBackend,
) -> Result<SynthesisResult> {
    let violations = validate(problem);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let asm = assemble(problem, options)?;
    let sol = backend.solve(&asm.qp, &options.qp)?;
    let stats = SolverStats::new(&asm, &sol);
    match sol.status {
        QpStatus::Optimal => extract(problem, &asm, sol.z, stats),
        QpStatus::Infeasible => Err(Error::Infeasible(Box::new(stats))),
        QpStatus::MaxIter => Err(Error::SolverFailure(Box::new(stats))),
    }
}

fn read_blt(
    horizon: usize,
    rows: usize,
    cols: usize,
    z: &[f64],
    index: impl Fn(usize, usize, usize, usize) -> Option<usize>,
    row_range: std::ops::RangeInclusive<usize>,
    strict: bool,
) -> BltMatrix {
    let mut m = BltMatrix::zeros(horizon, rows, cols);
    for r in row_range {
        let last = if strict { r } else { r + 1 };
        for c in 0..last {
            let block = DMatrix::from_fn(rows, cols, |i, j| index(r, c, i, j).map_or(0.0, |k| z[k]));
            m.set_block(r, c, block).expect("block inside lower triangle");
        }
    }
    m
}

fn extract(problem: &OcpProblem, asm: &AssembledQp, z: Vec<f64>, stats: SolverStats) -> Result<SynthesisResult> {
    let layout = &asm.layout;
    let (nx, nu, horizon) = (layout.nx, layout.nu, layout.horizon);
    let phi_x = read_blt(
        horizon,
        nx,
        nx,
        &z,
        |r, c, i, j| Some(layout.phi_x(r, c, i, j)),
        0..=horizon,
        false,
    );
    let phi_u = read_blt(
        horizon,
        nu,
        nx,
        &z,
        |r, c, i, j| Some(layout.phi_u(r, c, i, j)),
        0..=horizon,
        false,
    );
    let q = (0..horizon)
        .map(|t| DVector::from_fn(nx, |i, _| z[layout.q(t, i)]))
        .collect();
    let sub = (layout.filter != FilterMode::DiagOnly).then(|| {
        read_blt(
            horizon,
            nx,
            nx,
            &z,
            |r, c, i, j| layout.sigma_sub(r, c, i, j),
            1..=horizon,
            true,
        )
    });
    let controller_k = BltMatrix::right_divide(&phi_u, &phi_x)?;

    let x0 = problem.x0();
    let mut nominal_x = asm.h.clone();
    let mut nominal_u = StackedSignal::zeros(horizon, nu);
    for t in 0..=horizon {
        let px = phi_x.block_or_zero(t, 0) * x0;
        let mut xb = nominal_x.block_mut(t);
        xb += px;
        nominal_u.block_mut(t).copy_from(&(phi_u.block_or_zero(t, 0) * x0));
    }
    let objective = asm.qp.objective(&z) + asm.cost_constant;
    Ok(SynthesisResult {
        phi_x,
        phi_u,
        sigma: Filter { q, sub },
        h: asm.h.clone(),
        controller_k,
        nominal_x,
        nominal_u,
        objective,
        solver_stats: stats,
        z,
    })
}
