//! Convex QP in standard form and the bundled operator-splitting solver.
//!
//! ```text
//! minimize    ½ zᵀ P z + qᵀ z
//! subject to  A_eq z = b_eq
//!             G z ≤ h
//! ```
//!
//! The solver is an ADMM scheme on the stacked constraint set with Ruiz
//! equilibration, adaptive step size, primal infeasibility certificates and
//! active-set polishing. Anything that implements [`QpBackend`] with the same
//! [`QpSolution`] contract can replace it.

mod admm;
mod csc;
mod ipm;
mod ldl;
mod polish;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csc::CscMatrix;
pub use ldl::LdlFactor;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("invalid QP: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardQp {
    /// Full symmetric quadratic term.
    pub p_mat: CscMatrix,
    pub q_vec: Vec<f64>,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub g_ineq: CscMatrix,
    pub h_ineq: Vec<f64>,
}

impl StandardQp {
    pub fn n_vars(&self) -> usize {
        self.q_vec.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h_ineq.len()
    }

    pub fn check(&self) -> Result<(), QpError> {
        let n = self.n_vars();
        let bad = |m: String| Err(QpError::InvalidInput(m));
        if self.p_mat.nrows != n || self.p_mat.ncols != n {
            return bad(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p_mat.nrows, self.p_mat.ncols
            ));
        }
        if self.a_eq.ncols != n || self.a_eq.nrows != self.b_eq.len() {
            return bad("equality block does not conform".into());
        }
        if self.g_ineq.ncols != n || self.g_ineq.nrows != self.h_ineq.len() {
            return bad("inequality block does not conform".into());
        }
        let finite = self.p_mat.is_finite()
            && self.a_eq.is_finite()
            && self.g_ineq.is_finite()
            && self
                .q_vec
                .iter()
                .chain(&self.b_eq)
                .chain(&self.h_ineq)
                .all(|v| v.is_finite());
        if !finite {
            return bad("QP data contains NaN or Inf".into());
        }
        if !self.p_mat.is_symmetric(1e-12 * (1.0 + max_abs(&self.p_mat.nzval))) {
            return bad("P is not symmetric".into());
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let pz = self.p_mat.mul_vec(z);
        dot(z, &pz) * 0.5 + dot(&self.q_vec, z)
    }

    /// Residuals of a primal-dual pair, see [`Residuals`].
    pub fn residuals(&self, z: &[f64], y_eq: &[f64], y_ineq: &[f64]) -> Residuals {
        let mut eq = self.a_eq.mul_vec(z);
        for (r, b) in eq.iter_mut().zip(&self.b_eq) {
            *r -= b;
        }
        let gz = self.g_ineq.mul_vec(z);
        let ineq_violation = gz
            .iter()
            .zip(&self.h_ineq)
            .map(|(g, h)| (g - h).max(0.0))
            .fold(0.0, f64::max);
        let primal = max_abs(&eq).max(ineq_violation);

        let pz = self.p_mat.mul_vec(z);
        let aty_eq = self.a_eq.tr_mul_vec(y_eq);
        let aty_in = self.g_ineq.tr_mul_vec(y_ineq);
        let grad: Vec<f64> = (0..self.n_vars())
            .map(|j| pz[j] + self.q_vec[j] + aty_eq[j] + aty_in[j])
            .collect();
        let aty: Vec<f64> = aty_eq.iter().zip(&aty_in).map(|(a, b)| a + b).collect();
        let scale = 1.0f64.max(max_abs(&pz)).max(max_abs(&self.q_vec)).max(max_abs(&aty));
        let dual_sign = y_ineq.iter().fold(0.0f64, |m, &y| m.max(-y));
        Residuals {
            primal,
            dual: max_abs(&grad) / scale,
            dual_sign,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("QP serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, QpError> {
        serde_json::from_str(text).map_err(|e| QpError::InvalidInput(e.to_string()))
    }
}

/// Optimality measures of a candidate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// Largest equality error or inequality violation (absolute).
    pub primal: f64,
    /// `‖Pz + q + Aᵀy‖∞` divided by `max(1, ‖Pz‖∞, ‖q‖∞, ‖Aᵀy‖∞)`.
    pub dual: f64,
    /// Largest negative inequality multiplier magnitude.
    pub dual_sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_ineq: Vec<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub polished: bool,
}

/// Which bundled algorithm [`BundledBackend`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    /// Homogeneous self-dual interior point; robust on degenerate problems.
    #[default]
    InteriorPoint,
    /// Operator splitting with solution polishing; fast warm iterations.
    Admm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub method: QpMethod,
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
    pub polish: bool,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub check_every: usize,
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            method: QpMethod::default(),
            tol_feas: 1e-7,
            tol_opt: 1e-7,
            max_iter: 200_000,
            polish: true,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adaptive_rho: true,
            check_every: 10,
            eps_infeasible: 1e-6,
        }
    }
}

/// A QP solver satisfying the [`QpSolution`] contract: when `status` is
/// `Optimal`, `primal_residual ≤ tol_feas` and `dual_residual ≤ tol_opt`.
pub trait QpBackend: Send + Sync {
    fn solve(&self, qp: &StandardQp, settings: &QpSettings) -> Result<QpSolution, QpError>;
}

/// The solvers shipped with this crate, selected by [`QpSettings::method`].
#[derive(Debug, Clone, Copy, Default)]
pub struct BundledBackend;

impl QpBackend for BundledBackend {
    fn solve(&self, qp: &StandardQp, settings: &QpSettings) -> Result<QpSolution, QpError> {
        match settings.method {
            QpMethod::InteriorPoint => ipm::solve(qp, settings),
            QpMethod::Admm => admm::solve(qp, settings),
        }
    }
}

pub fn solve(qp: &StandardQp, tol_feas: f64, tol_opt: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let settings = QpSettings {
        tol_feas,
        tol_opt,
        max_iter,
        ..QpSettings::default()
    };
    BundledBackend.solve(qp, &settings)
}

/// Splits the stacked multipliers and evaluates the contract residuals.
#[allow(clippy::too_many_arguments)]
pub(super) fn package(
    qp: &StandardQp,
    status: QpStatus,
    z: Vec<f64>,
    y: Vec<f64>,
    n_eq: usize,
    iterations: usize,
    polished: bool,
    start: Instant,
) -> QpSolution {
    let (y_eq, y_ineq) = (y[..n_eq].to_vec(), y[n_eq..].to_vec());
    let r = qp.residuals(&z, &y_eq, &y_ineq);
    QpSolution {
        objective: qp.objective(&z),
        primal_residual: r.primal,
        dual_residual: r.dual,
        z,
        y_eq,
        y_ineq,
        status,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        polished,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
}
