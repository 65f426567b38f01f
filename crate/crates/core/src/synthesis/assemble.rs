//! Constraint and cost generation for the robust OCP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::layout::{AuxTag, VariableLayout};
use crate::blockops::{DelayBlocks, StackedSignal};
use crate::error::Result;
use crate::model::{OcpProblem, PolytopeSet};
use crate::qp::{CscMatrix, StandardQp};

/// Sparse affine expression `Σ coef · z[idx] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn add_term(&mut self, idx: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((idx, coef));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        for &(k, v) in &other.terms {
            self.add_term(k, v * s);
        }
        self.constant += other.constant * s;
    }

    pub fn negated(&self) -> Self {
        let mut out = Self::default();
        out.add_scaled(self, -1.0);
        out
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(k, v)| v * z[k]).sum::<f64>()
    }
}

/// Which sum the nominal cost applies `Q_T` to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `Q_T` on each of the last `max(na, 1)` predicted states, `Q` before.
    #[default]
    PerTime,
    /// `Q` on `t = 0..=T-na` and `na · x̂_Tᵀ Q_T x̂_T`.
    Literal,
}

/// Accumulates linear rows and epigraph variables.
#[derive(Debug, Clone)]
pub struct QpBuilder {
    pub n_core: usize,
    pub aux_tags: Vec<AuxTag>,
    eq: Vec<(usize, usize, f64)>,
    b_eq: Vec<f64>,
    ineq: Vec<(usize, usize, f64)>,
    h_ineq: Vec<f64>,
}

impl QpBuilder {
    pub fn new(layout: &VariableLayout) -> Self {
        Self {
            n_core: layout.n_core,
            aux_tags: Vec::new(),
            eq: Vec::new(),
            b_eq: Vec::new(),
            ineq: Vec::new(),
            h_ineq: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_core + self.aux_tags.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h_ineq.len()
    }

    /// `expr = 0`.
    pub fn push_eq(&mut self, expr: &LinExpr) {
        let row = self.b_eq.len();
        self.eq.extend(expr.terms.iter().map(|&(k, v)| (row, k, v)));
        self.b_eq.push(-expr.constant);
    }

    /// `expr ≤ 0`.
    pub fn push_le(&mut self, expr: &LinExpr) {
        let row = self.h_ineq.len();
        self.ineq.extend(expr.terms.iter().map(|&(k, v)| (row, k, v)));
        self.h_ineq.push(-expr.constant);
    }

    /// New variable `s` with `|expr| ≤ s`; returns its index.
    pub fn abs_epigraph(&mut self, expr: &LinExpr, tag: AuxTag) -> usize {
        let s = self.n_vars();
        self.aux_tags.push(tag);
        let mut up = expr.clone();
        up.add_term(s, -1.0);
        self.push_le(&up);
        let mut down = expr.negated();
        down.add_term(s, -1.0);
        self.push_le(&down);
        s
    }

    pub fn finish(self, cost: &QuadCost) -> StandardQp {
        let n = self.n_vars();
        let mut q_vec = cost.linear.clone();
        q_vec.resize(n, 0.0);
        StandardQp {
            p_mat: CscMatrix::from_triplets(n, n, &cost.quad),
            q_vec,
            a_eq: CscMatrix::from_triplets(self.b_eq.len(), n, &self.eq),
            b_eq: self.b_eq,
            g_ineq: CscMatrix::from_triplets(self.h_ineq.len(), n, &self.ineq),
            h_ineq: self.h_ineq,
        }
    }
}

/// `(I - Z Â) Φ̃ₓ - Z B̂ Φ̃ᵤ = Σ`, one row per entry of every BLT block.
pub fn affine_constraint_rows(layout: &VariableLayout, nominal: &DelayBlocks, builder: &mut QpBuilder) {
    let (nx, nu, t_max) = (layout.nx, layout.nu, layout.horizon);
    for r in 0..=t_max {
        for c in 0..=r {
            for i in 0..nx {
                for j in 0..nx {
                    let mut e = LinExpr::default();
                    e.add_term(layout.phi_x(r, c, i, j), 1.0);
                    if r >= 1 {
                        for k in c..r {
                            if let Some(a) = nominal.a.block(r - 1, k) {
                                for p in 0..nx {
                                    e.add_term(layout.phi_x(k, c, p, j), -a[(i, p)]);
                                }
                            }
                            if let Some(b) = nominal.b.block(r - 1, k) {
                                for p in 0..nu {
                                    e.add_term(layout.phi_u(k, c, p, j), -b[(i, p)]);
                                }
                            }
                        }
                    }
                    if r == 0 {
                        e.constant -= if i == j { 1.0 } else { 0.0 };
                    } else if r == c {
                        if i == j {
                            e.add_term(layout.q(r - 1, i), -1.0);
                        }
                    } else if let Some(s) = layout.sigma_sub(r, c, i, j) {
                        e.add_term(s, -1.0);
                    }
                    builder.push_eq(&e);
                }
            }
        }
    }
}

/// `C` and `v` for one uncertainty vertex as affine maps of the decision
/// vector.
#[derive(Debug, Clone)]
pub struct CvMaps {
    horizon: usize,
    nx: usize,
    /// Blocks `C(r, c)`, `1 ≤ r ≤ T`, `c < r`, row-major entries, stored at
    /// `tri_index(r - 1, c)`.
    c_blocks: Vec<Vec<LinExpr>>,
    /// `v_t`, `t = 0..T-1`.
    v: Vec<Vec<LinExpr>>,
}

impl CvMaps {
    pub fn c(&self, r: usize, c: usize, i: usize, m: usize) -> &LinExpr {
        debug_assert!(c < r && r <= self.horizon);
        &self.c_blocks[(r - 1) * r / 2 + c][i * self.nx + m]
    }

    pub fn v(&self, t: usize, i: usize) -> &LinExpr {
        &self.v[t][i]
    }
}

/// Builds `C = Z Δ_A Φ̃ₓ + Z Δ_B Φ̃ᵤ - Σ_sub` and
/// `v = C(:,0) x_0 + Z Δ_A h + Z Δ_A⁻ x⁻ + Z Δ_B⁻ u⁻` for one vertex.
pub fn assemble_c_and_v(
    layout: &VariableLayout,
    delta: &DelayBlocks,
    h: &StackedSignal,
    x_minus: &DVector<f64>,
    u_minus: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<CvMaps> {
    let (nx, nu, t_max) = (layout.nx, layout.nu, layout.horizon);
    let mut c_blocks = Vec::with_capacity(t_max * (t_max + 1) / 2);
    for r in 1..=t_max {
        for c in 0..r {
            let mut block = vec![LinExpr::default(); nx * nx];
            for i in 0..nx {
                for m in 0..nx {
                    let e = &mut block[i * nx + m];
                    for k in c..r {
                        if let Some(da) = delta.a.block(r - 1, k) {
                            for p in 0..nx {
                                e.add_term(layout.phi_x(k, c, p, m), da[(i, p)]);
                            }
                        }
                        if let Some(db) = delta.b.block(r - 1, k) {
                            for p in 0..nu {
                                e.add_term(layout.phi_u(k, c, p, m), db[(i, p)]);
                            }
                        }
                    }
                    if let Some(s) = layout.sigma_sub(r, c, i, m) {
                        e.add_term(s, -1.0);
                    }
                }
            }
            c_blocks.push(block);
        }
    }
    let known = delta.a.apply(h)?.data + &delta.a_minus * x_minus + &delta.b_minus * u_minus;
    let mut maps = CvMaps {
        horizon: t_max,
        nx,
        c_blocks,
        v: Vec::with_capacity(t_max),
    };
    for t in 0..t_max {
        let row: Vec<LinExpr> = (0..nx)
            .map(|i| {
                let mut e = LinExpr::constant(known[t * nx + i]);
                for m in 0..nx {
                    e.add_scaled(maps.c(t + 1, 0, i, m), x0[m]);
                }
                e
            })
            .collect();
        maps.v.push(row);
    }
    Ok(maps)
}

/// `|v_{t,i}| + Σ_{j=1..t} ‖e_iᵀ C(t+1, j)‖₁ + σ_w ≤ q_{t,i}` for one vertex.
pub fn overapprox_constraints(
    layout: &VariableLayout,
    maps: &CvMaps,
    vertex: usize,
    sigma_w: f64,
    builder: &mut QpBuilder,
) {
    let nx = layout.nx;
    for t in 0..layout.horizon {
        for i in 0..nx {
            let mut row = LinExpr::constant(sigma_w);
            let sv = builder.abs_epigraph(maps.v(t, i), AuxTag::OverV { l: vertex, t, i });
            row.add_term(sv, 1.0);
            for j in 1..=t {
                for m in 0..nx {
                    let tag = AuxTag::OverC { l: vertex, t, i, j, m };
                    let sc = builder.abs_epigraph(maps.c(t + 1, j, i, m), tag);
                    row.add_term(sc, 1.0);
                }
            }
            row.add_term(layout.q(t, i), -1.0);
            builder.push_le(&row);
        }
    }
}

/// Lower bound `q ≥ q_min` on every filter scale.
pub fn filter_floor(layout: &VariableLayout, q_min: f64, builder: &mut QpBuilder) {
    for t in 0..layout.horizon {
        for i in 0..layout.nx {
            let mut e = LinExpr::constant(q_min);
            e.add_term(layout.q(t, i), -1.0);
            builder.push_le(&e);
        }
    }
}

#[derive(Clone, Copy)]
enum Channel {
    State,
    Input,
}

fn tightened_rows(
    layout: &VariableLayout,
    channel: Channel,
    t: usize,
    set: &PolytopeSet,
    offset: Option<DVector<f64>>,
    x0: &DVector<f64>,
    builder: &mut QpBuilder,
) {
    let nx = layout.nx;
    let (rows, var): (usize, &dyn Fn(usize, usize, usize, usize) -> usize) = match channel {
        Channel::State => (nx, &|r, c, i, j| layout.phi_x(r, c, i, j)),
        Channel::Input => (layout.nu, &|r, c, i, j| layout.phi_u(r, c, i, j)),
    };
    for (facet, (f, b)) in set.facets().enumerate() {
        let mut row = LinExpr::constant(-b);
        if let Some(h) = &offset {
            row.constant += f.dot(h);
        }
        for i in 0..rows {
            for m in 0..nx {
                row.add_term(var(t, 0, i, m), f[i] * x0[m]);
            }
        }
        for j in 1..=t {
            for m in 0..nx {
                let mut e = LinExpr::default();
                for i in 0..rows {
                    e.add_term(var(t, j, i, m), f[i]);
                }
                let tag = match channel {
                    Channel::State => AuxTag::StateL1 { facet, t, j, m },
                    Channel::Input => AuxTag::InputL1 { facet, t, j, m },
                };
                let s = builder.abs_epigraph(&e, tag);
                row.add_term(s, 1.0);
            }
        }
        builder.push_le(&row);
    }
}

/// Robustly tightened state (`t = 0..T-1`), terminal (`t = T`, when a set
/// is given) and input (`t = 0..T-1`) constraints.
pub fn tighten_constraints(layout: &VariableLayout, problem: &OcpProblem, h: &StackedSignal, builder: &mut QpBuilder) {
    let x0 = problem.x0();
    for t in 0..=layout.horizon {
        if let Some(set) = problem.state_set_at(t) {
            let offset = Some(h.block(t).clone_owned());
            tightened_rows(layout, Channel::State, t, set, offset, x0, builder);
        }
    }
    for t in 0..layout.horizon {
        tightened_rows(layout, Channel::Input, t, &problem.u_set, None, x0, builder);
    }
}

/// `½ zᵀ P z + linᵀ z + constant` over the core variables.
#[derive(Debug, Clone, Default)]
pub struct QuadCost {
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl QuadCost {
    /// Adds `(M z + c)ᵀ W (M z + c)` where row `i` of `M` has entries
    /// `rows[i]`.
    fn add_weighted(&mut self, rows: &[Vec<(usize, f64)>], c: &DVector<f64>, w: &DMatrix<f64>) {
        for (i, ri) in rows.iter().enumerate() {
            for (k, rk) in rows.iter().enumerate() {
                let wik = w[(i, k)];
                if wik == 0.0 {
                    continue;
                }
                for &(a, va) in ri {
                    for &(b, vb) in rk {
                        self.quad.push((a, b, 2.0 * wik * va * vb));
                    }
                    self.linear[a] += 2.0 * wik * va * c[k];
                }
                self.constant += c[i] * wik * c[k];
            }
        }
    }
}

/// Per-time stage and terminal weights as `(t, weight)` pairs for states.
pub fn state_weights(problem: &OcpProblem, mode: CostMode) -> Vec<(usize, DMatrix<f64>)> {
    let t_max = problem.horizon;
    let na = problem.system.na;
    match mode {
        CostMode::PerTime => {
            let split = t_max + 1 - na.max(1);
            (0..=t_max)
                .map(|t| {
                    let w = if t < split {
                        problem.q_weight.clone()
                    } else {
                        problem.qt_weight.clone()
                    };
                    (t, w)
                })
                .collect()
        }
        CostMode::Literal => {
            let mut out: Vec<_> = (0..=t_max - na).map(|t| (t, problem.q_weight.clone())).collect();
            if na > 0 {
                out.push((t_max, &problem.qt_weight * na as f64));
            }
            out
        }
    }
}

/// Nominal quadratic cost in `x̂ = Φ̃ₓ(:,0) x_0 + h` and `û = Φ̃ᵤ(:,0) x_0`.
pub fn nominal_cost(layout: &VariableLayout, problem: &OcpProblem, h: &StackedSignal, mode: CostMode) -> QuadCost {
    let (nx, nu) = (layout.nx, layout.nu);
    let x0 = problem.x0();
    let mut cost = QuadCost {
        linear: vec![0.0; layout.n_core],
        ..QuadCost::default()
    };
    let rows_of = |rows: usize, var: &dyn Fn(usize, usize) -> usize| -> Vec<Vec<(usize, f64)>> {
        (0..rows)
            .map(|i| (0..nx).filter(|&m| x0[m] != 0.0).map(|m| (var(i, m), x0[m])).collect())
            .collect()
    };
    for (t, w) in state_weights(problem, mode) {
        let rows = rows_of(nx, &|i, m| layout.phi_x(t, 0, i, m));
        cost.add_weighted(&rows, &h.block(t).clone_owned(), &w);
    }
    let zero_u = DVector::zeros(nu);
    for t in 0..layout.horizon {
        let rows = rows_of(nu, &|i, m| layout.phi_u(t, 0, i, m));
        cost.add_weighted(&rows, &zero_u, &problem.r_weight);
    }
    cost
}
