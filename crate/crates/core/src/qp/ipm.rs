//! Primal-dual interior-point method on the homogeneous self-dual embedding
//! of `min ½xᵀPx + qᵀx  s.t.  Ax + s = b,  s ∈ {0}ᵐᵉ × ℝ₊ᵐⁱ`, with
//! Mehrotra predictor-corrector steps.
//!
//! Each iteration factors the quasi-definite system `[P Aᵀ; A -H]` with
//! `H = diag(s ./ z)` on the inequality rows and zero on the equality rows,
//! using static plus dynamic regularization and iterative refinement.

use std::time::Instant;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use super::admm::{infeasibility_certificate, Scaled};
use super::csc::CscMatrix;
use super::{dot, max_abs, package, QpError, QpSettings, QpSolution, QpStatus, StandardQp};

const STATIC_REG: f64 = 1e-8;
const DYN_REG_EPS: f64 = 1e-7;
const DYN_REG_DELTA: f64 = 2e-7;
const REFINE_ITERS: usize = 10;
const STEP_FRACTION: f64 = 0.99;
const MIN_STEP: f64 = 1e-10;
const ITER_CAP: usize = 200;
const H_MIN: f64 = 1e-14;
const H_MAX: f64 = 1e14;

struct Kkt<'a> {
    s: &'a Scaled,
    mat: CscMatrix,
    symbolic: SymbolicCholesky<usize>,
    l_values: Vec<f64>,
    signs: Vec<i8>,
    stack: MemBuffer,
    diag_pos: Vec<usize>,
    /// `H` on all `m` dual rows (zero on equalities).
    h: Vec<f64>,
    resid: Vec<f64>,
    corr: Vec<f64>,
}

impl<'a> Kkt<'a> {
    fn new(s: &'a Scaled, h: Vec<f64>) -> Result<Self, QpError> {
        let (n, m) = (s.n(), s.m());
        let mut t = Vec::with_capacity(s.p_upper.nnz() + n + s.a.nnz() + m);
        t.extend(s.p_upper.triplets());
        t.extend((0..n).map(|j| (j, j, STATIC_REG)));
        t.extend(s.a.triplets().into_iter().map(|(r, c, v)| (c, n + r, v)));
        t.extend((0..m).map(|i| (n + i, n + i, -(h[i] + STATIC_REG))));
        let mat = CscMatrix::from_triplets(n + m, n + m, &t);
        let diag_pos = (0..m).map(|i| mat.colptr[n + i + 1] - 1).collect();
        let pattern = SymbolicSparseColMatRef::new_checked(n + m, n + m, &mat.colptr, None, &mat.rowval);
        let symbolic = factorize_symbolic_cholesky(
            pattern,
            Side::Upper,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams::default(),
        )
        .map_err(|e| QpError::Numerical(format!("symbolic factorization: {e:?}")))?;
        let scratch = symbolic
            .factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default())
            .or(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        let mut kkt = Self {
            s,
            l_values: vec![0.0; symbolic.len_val()],
            symbolic,
            signs: (0..n + m).map(|k| if k < n { 1 } else { -1 }).collect(),
            stack: MemBuffer::new(scratch),
            mat,
            diag_pos,
            h,
            resid: vec![0.0; n + m],
            corr: vec![0.0; n + m],
        };
        kkt.factor()?;
        Ok(kkt)
    }

    fn factor(&mut self) -> Result<(), QpError> {
        let dim = self.mat.ncols;
        let pattern = SymbolicSparseColMatRef::new_checked(dim, dim, &self.mat.colptr, None, &self.mat.rowval);
        let regularization = LdltRegularization {
            dynamic_regularization_signs: Some(&self.signs),
            dynamic_regularization_delta: DYN_REG_DELTA,
            dynamic_regularization_epsilon: DYN_REG_EPS,
        };
        self.symbolic
            .factorize_numeric_ldlt(
                &mut self.l_values,
                SparseColMatRef::new(pattern, &self.mat.nzval),
                Side::Upper,
                regularization,
                Par::Seq,
                MemStack::new(&mut self.stack),
                Default::default(),
            )
            .map_err(|e| QpError::Numerical(format!("KKT factorization: {e:?}")))?;
        if self.l_values.iter().any(|v| !v.is_finite()) {
            return Err(QpError::Numerical("non-finite KKT factor".into()));
        }
        Ok(())
    }

    fn refactor(&mut self, h: &[f64]) -> Result<(), QpError> {
        self.h.copy_from_slice(h);
        for (&k, v) in self.diag_pos.iter().zip(h) {
            self.mat.nzval[k] = -(v + STATIC_REG);
        }
        self.factor()
    }

    fn back_solve(&mut self, x: &mut [f64]) {
        let dim = x.len();
        LdltRef::new(&self.symbolic, &self.l_values).solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(x, dim, 1),
            Par::Seq,
            MemStack::new(&mut self.stack),
        );
    }

    /// `out = [P Aᵀ; A -H] v` without regularization.
    fn mul(&self, v: &[f64], out: &mut [f64]) {
        let n = self.s.n();
        let (vx, vz) = v.split_at(n);
        let (ox, oz) = out.split_at_mut(n);
        ox.fill(0.0);
        self.s.p_full.gemv(1.0, vx, ox);
        self.s.a.gemv_t(1.0, vz, ox);
        oz.fill(0.0);
        self.s.a.gemv(1.0, vx, oz);
        for (i, o) in oz.iter_mut().enumerate() {
            *o -= self.h[i] * vz[i];
        }
    }

    fn solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        out.copy_from_slice(rhs);
        self.back_solve(out);
        let scale = 1.0 + max_abs(rhs);
        let mut last = f64::INFINITY;
        let mut resid = std::mem::take(&mut self.resid);
        let mut corr = std::mem::take(&mut self.corr);
        for _ in 0..REFINE_ITERS {
            self.mul(out, &mut resid);
            for (r, b) in resid.iter_mut().zip(rhs) {
                *r = b - *r;
            }
            let err = max_abs(&resid);
            if err <= 1e-12 * scale || err >= 0.2 * last {
                break;
            }
            last = err;
            corr.copy_from_slice(&resid);
            self.back_solve(&mut corr);
            for (o, c) in out.iter_mut().zip(&corr) {
                *o += c;
            }
        }
        self.resid = resid;
        self.corr = corr;
    }
}

/// Largest `α ∈ (0, cap]` with `v + α dv ≥ 0` over the listed entries.
fn max_step(v: &[f64], dv: &[f64], cap: f64) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .fold(cap, |a, (&x, &d)| a.min(-x / d))
}

fn shift_positive(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    if lo <= 0.0 {
        for x in v.iter_mut() {
            *x += 1.0 - lo;
        }
    }
}

struct Point {
    x: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Step {
    x: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

impl Step {
    /// Largest step in `(0, cap]` keeping the cone variables nonnegative.
    fn max_alpha(&self, p: &Point, meq: usize, cap: f64) -> f64 {
        let a = max_step(&p.s[meq..], &self.s[meq..], cap);
        let a = max_step(&p.z[meq..], &self.z[meq..], a);
        max_step(&[p.tau, p.kappa], &[self.tau, self.kappa], a)
    }
}

/// Quantities shared by the predictor and corrector solves.
struct Linearization {
    rx: Vec<f64>,
    rz: Vec<f64>,
    rtau: f64,
    px: Vec<f64>,
    /// Solution of `K [x1; z1] = [-q; b]`.
    sol1: Vec<f64>,
    denom: f64,
}

/// Newton direction reducing the residuals by `1 - σ` and targeting the
/// complementarity `σμ`, with the second-order correction from `pred`.
fn newton_step(
    kkt: &mut Kkt,
    b: &[f64],
    p: &Point,
    lin: &Linearization,
    corrector: Option<(&Step, (f64, f64))>,
) -> Step {
    let s = kkt.s;
    let (n, m, meq) = (s.n(), s.m(), s.n_eq);
    let (scale, target) = match corrector {
        None => (1.0, 0.0),
        Some((_, target)) => (1.0 - target.1, target.0 * target.1),
    };
    let mut ds = vec![0.0; m];
    for i in meq..m {
        ds[i] = p.s[i] * p.z[i] - target;
        if let Some((pred, _)) = corrector {
            ds[i] += pred.s[i] * pred.z[i];
        }
    }
    let mut dk = p.tau * p.kappa - target;
    if let Some((pred, _)) = corrector {
        dk += pred.tau * pred.kappa;
    }
    let mut rhs = vec![0.0; n + m];
    for j in 0..n {
        rhs[j] = -scale * lin.rx[j];
    }
    for i in 0..m {
        rhs[n + i] = -scale * lin.rz[i];
        if i >= meq {
            rhs[n + i] += ds[i] / p.z[i];
        }
    }
    let mut sol2 = vec![0.0; n + m];
    kkt.solve(&rhs, &mut sol2);
    let (x1, z1) = lin.sol1.split_at(n);
    let (x2, z2) = sol2.split_at(n);
    let num = -scale * lin.rtau + dk / p.tau - dot(&s.q, x2) - dot(b, z2) - 2.0 * dot(&lin.px, x2) / p.tau;
    let dtau = -num / lin.denom;
    let x: Vec<f64> = (0..n).map(|j| x2[j] + dtau * x1[j]).collect();
    let z: Vec<f64> = (0..m).map(|i| z2[i] + dtau * z1[i]).collect();
    let sl: Vec<f64> = (0..m)
        .map(|i| {
            if i >= meq {
                -(ds[i] + p.s[i] * z[i]) / p.z[i]
            } else {
                0.0
            }
        })
        .collect();
    let kappa = -(dk + p.kappa * dtau) / p.tau;
    Step {
        x,
        z,
        s: sl,
        tau: dtau,
        kappa,
    }
}

pub(super) fn solve(qp: &StandardQp, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.check()?;
    let start = Instant::now();
    let s = Scaled::new(qp, settings.scaling_iters);
    let (n, m, meq) = (s.n(), s.m(), s.n_eq);
    let mi = m - meq;
    // Right-hand side `b`: equalities and inequality upper bounds.
    let b = s.u.clone();

    let mut h = vec![1.0; m];
    h[..meq].fill(0.0);
    let mut kkt = Kkt::new(&s, h.clone())?;

    // Initial point from the regularized least-squares system.
    let mut rhs: Vec<f64> = s.q.iter().map(|q| -q).chain(b.iter().copied()).collect();
    let mut sol = vec![0.0; n + m];
    kkt.solve(&rhs, &mut sol);
    let mut p = Point {
        x: sol[..n].to_vec(),
        z: sol[n..].to_vec(),
        s: vec![0.0; m],
        tau: 1.0,
        kappa: 1.0,
    };
    for i in meq..m {
        p.s[i] = -p.z[i];
    }
    shift_positive(&mut p.s[meq..]);
    shift_positive(&mut p.z[meq..]);

    let mut work = vec![0.0; n];
    let max_iter = settings.max_iter.min(ITER_CAP);
    let mut iter = 0;
    let mut last = None;
    while iter < max_iter {
        let tau = p.tau;
        let mut px = vec![0.0; n];
        s.p_full.gemv(1.0, &p.x, &mut px);
        let mut rx = px.clone();
        s.a.gemv_t(1.0, &p.z, &mut rx);
        rx.iter_mut().zip(&s.q).for_each(|(r, q)| *r += q * tau);
        let mut rz = p.s.clone();
        s.a.gemv(1.0, &p.x, &mut rz);
        rz.iter_mut().zip(&b).for_each(|(r, bi)| *r -= bi * tau);
        let xpx = dot(&p.x, &px);
        let rtau = dot(&s.q, &p.x) + dot(&b, &p.z) + p.kappa + xpx / tau;
        let mu = (dot(&p.s[meq..], &p.z[meq..]) + tau * p.kappa) / (mi as f64 + 1.0);

        // Convergence on the caller's problem.
        let xs: Vec<f64> = p.x.iter().map(|v| v / tau).collect();
        let zs: Vec<f64> = p.z.iter().map(|v| v / tau).collect();
        let (zu, yu) = s.unscale(&xs, &zs);
        let r = qp.residuals(&zu, &yu[..meq], &yu[meq..]);
        let primal_obj = qp.objective(&zu);
        let quad = primal_obj - dot(&qp.q_vec, &zu);
        let dual_obj = -quad - dot(&qp.b_eq, &yu[..meq]) - dot(&qp.h_ineq, &yu[meq..]);
        let gap = (primal_obj - dual_obj).abs() / primal_obj.abs().max(dual_obj.abs()).max(1.0);
        if r.primal <= settings.tol_feas && r.dual <= settings.tol_opt && gap <= settings.tol_opt {
            return Ok(package(qp, QpStatus::Optimal, zu, yu, meq, iter, false, start));
        }
        if infeasibility_certificate(&s, &p.z, settings.eps_infeasible, &mut work) {
            let (_, cert) = s.unscale(&p.x, &p.z);
            return Ok(package(qp, QpStatus::Infeasible, zu, cert, meq, iter, false, start));
        }
        last = Some((zu, yu));
        iter += 1;

        for i in meq..m {
            h[i] = (p.s[i] / p.z[i]).clamp(H_MIN, H_MAX);
        }
        if kkt.refactor(&h).is_err() {
            break;
        }
        rhs[..n].iter_mut().zip(&s.q).for_each(|(r, q)| *r = -q);
        rhs[n..].copy_from_slice(&b);
        let mut sol1 = vec![0.0; n + m];
        kkt.solve(&rhs, &mut sol1);
        let (x1, z1) = sol1.split_at(n);
        let mut p_x1 = vec![0.0; n];
        s.p_full.gemv(1.0, x1, &mut p_x1);
        // (x1 - ξ)ᵀP(x1 - ξ) with ξ = x/τ.
        let quad_x1 = dot(x1, &p_x1) - 2.0 * dot(x1, &px) / tau + xpx / (tau * tau);
        let quad_z1: f64 = (meq..m).map(|i| h[i] * z1[i] * z1[i]).sum();
        let lin = Linearization {
            rx,
            rz,
            rtau,
            px,
            denom: p.kappa / tau + quad_x1.max(0.0) + quad_z1,
            sol1,
        };

        let pred = newton_step(&mut kkt, &b, &p, &lin, None);
        let alpha_aff = pred.max_alpha(&p, meq, 1.0);
        let sigma = (1.0 - alpha_aff).powi(3);
        let step = newton_step(&mut kkt, &b, &p, &lin, Some((&pred, (mu, sigma))));
        let alpha = (STEP_FRACTION * step.max_alpha(&p, meq, f64::INFINITY)).min(1.0);
        if alpha < MIN_STEP {
            break;
        }
        for j in 0..n {
            p.x[j] += alpha * step.x[j];
        }
        for i in 0..m {
            p.z[i] += alpha * step.z[i];
            p.s[i] += alpha * step.s[i];
        }
        p.tau += alpha * step.tau;
        p.kappa += alpha * step.kappa;
    }
    let (zu, yu) = last.unwrap_or_else(|| s.unscale(&p.x, &p.z));
    Ok(package(qp, QpStatus::MaxIter, zu, yu, meq, iter, false, start))
}
