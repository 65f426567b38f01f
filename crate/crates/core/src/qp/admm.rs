//! OSQP-style ADMM on `l ≤ A z ≤ u`.

use std::time::Instant;

use super::csc::CscMatrix;
use super::ldl::LdlFactor;
use super::polish::polish;
use super::{max_abs, package, QpError, QpSettings, QpSolution, QpStatus, StandardQp};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const ADAPT_EVERY: usize = 25;
const ADAPT_RATIO: f64 = 5.0;

/// Problem data after equilibration: `P̄ = c D P D`, `q̄ = c D q`,
/// `Ā = E A D`, `l̄ = E l`, `ū = E u`.
pub(super) struct Scaled {
    pub p_full: CscMatrix,
    pub p_upper: CscMatrix,
    pub q: Vec<f64>,
    pub a: CscMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub c: f64,
    pub n_eq: usize,
}

fn clamp_scale(norm: f64) -> f64 {
    if norm < 1e-4 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(1e-4, 1e4)
    }
}

impl Scaled {
    pub(super) fn new(qp: &StandardQp, iters: usize) -> Self {
        let n = qp.n_vars();
        let n_eq = qp.n_eq();
        let mut p_full = qp.p_mat.clone();
        let mut a = qp.a_eq.vstack(&qp.g_ineq);
        let m = a.nrows;
        let mut q = qp.q_vec.clone();
        let mut l: Vec<f64> = qp
            .b_eq
            .iter()
            .copied()
            .chain(std::iter::repeat_n(f64::NEG_INFINITY, qp.n_ineq()))
            .collect();
        let mut u: Vec<f64> = qp.b_eq.iter().chain(&qp.h_ineq).copied().collect();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut c = 1.0;

        for _ in 0..iters {
            let pn = p_full.col_inf_norms();
            let an = a.col_inf_norms();
            let dt: Vec<f64> = (0..n).map(|j| clamp_scale(pn[j].max(an[j]))).collect();
            let et: Vec<f64> = a.row_inf_norms().into_iter().map(clamp_scale).collect();
            p_full.scale(&dt, &dt);
            a.scale(&et, &dt);
            for j in 0..n {
                q[j] *= dt[j];
                d[j] *= dt[j];
            }
            for i in 0..m {
                e[i] *= et[i];
            }
        }
        let pn = p_full.col_inf_norms();
        let mean = if n > 0 { pn.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let scale = mean.max(max_abs(&q));
        if scale > 1e-6 {
            c = (1.0 / scale).clamp(1e-4, 1e4);
            p_full.nzval.iter_mut().for_each(|v| *v *= c);
            q.iter_mut().for_each(|v| *v *= c);
        }
        for i in 0..m {
            l[i] *= e[i];
            u[i] *= e[i];
        }
        let p_upper = p_full.upper_triangle();
        Self {
            p_full,
            p_upper,
            q,
            a,
            l,
            u,
            d,
            e,
            c,
            n_eq,
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    /// Unscales a primal-dual pair back to the caller's variables.
    pub fn unscale(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = x.iter().zip(&self.d).map(|(v, d)| v * d).collect();
        let y = y.iter().zip(&self.e).map(|(v, e)| v * e / self.c).collect();
        (z, y)
    }
}

/// Upper triangle of `[P̄ + σI, Āᵀ; Ā, -diag(1/ρ)]` and the CSC positions of
/// the `-1/ρ` entries.
fn build_kkt(s: &Scaled, sigma: f64, rho: &[f64]) -> (CscMatrix, Vec<usize>) {
    let (n, m) = (s.n(), s.m());
    let mut t = Vec::with_capacity(s.p_upper.nnz() + n + s.a.nnz() + m);
    t.extend(s.p_upper.triplets());
    t.extend((0..n).map(|j| (j, j, sigma)));
    t.extend(s.a.triplets().into_iter().map(|(r, c, v)| (c, n + r, v)));
    t.extend((0..m).map(|i| (n + i, n + i, -1.0 / rho[i])));
    let kkt = CscMatrix::from_triplets(n + m, n + m, &t);
    // the diagonal is the largest row index of its column
    let diag = (0..m).map(|i| kkt.colptr[n + i + 1] - 1).collect();
    (kkt, diag)
}

struct Measures {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

fn measure(s: &Scaled, x: &[f64], z: &[f64], y: &[f64], ax: &mut [f64], px: &mut [f64], aty: &mut [f64]) -> Measures {
    ax.fill(0.0);
    s.a.gemv(1.0, x, ax);
    px.fill(0.0);
    s.p_full.gemv(1.0, x, px);
    aty.fill(0.0);
    s.a.gemv_t(1.0, y, aty);
    let mut prim = 0.0f64;
    let mut ax_n = 0.0f64;
    let mut z_n = 0.0f64;
    for i in 0..s.m() {
        let ei = 1.0 / s.e[i];
        prim = prim.max((ei * (ax[i] - z[i])).abs());
        ax_n = ax_n.max((ei * ax[i]).abs());
        z_n = z_n.max((ei * z[i]).abs());
    }
    let mut dual = 0.0f64;
    let (mut px_n, mut aty_n, mut q_n) = (0.0f64, 0.0f64, 0.0f64);
    for j in 0..s.n() {
        let dj = 1.0 / (s.d[j] * s.c);
        dual = dual.max((dj * (px[j] + s.q[j] + aty[j])).abs());
        px_n = px_n.max((dj * px[j]).abs());
        aty_n = aty_n.max((dj * aty[j]).abs());
        q_n = q_n.max((dj * s.q[j]).abs());
    }
    Measures {
        prim,
        dual,
        prim_scale: ax_n.max(z_n),
        dual_scale: px_n.max(aty_n).max(q_n),
    }
}

/// Checks whether `δy` certifies primal infeasibility.
pub(super) fn infeasibility_certificate(s: &Scaled, dy: &[f64], eps: f64, work: &mut [f64]) -> bool {
    let mut norm = 0.0f64;
    for i in 0..s.m() {
        norm = norm.max((s.e[i] * dy[i]).abs());
    }
    if norm < 1e-12 {
        return false;
    }
    let mut support = 0.0;
    for i in 0..s.m() {
        if dy[i] > 0.0 {
            if s.u[i].is_infinite() {
                return false;
            }
            support += s.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if s.l[i].is_infinite() {
                return false;
            }
            support += s.l[i] * dy[i];
        }
    }
    if support >= -eps * norm {
        return false;
    }
    work.fill(0.0);
    s.a.gemv_t(1.0, dy, work);
    let atdy = work.iter().zip(&s.d).fold(0.0f64, |m, (v, d)| m.max((v / d).abs()));
    atdy <= eps * norm
}

fn rho_vector(s: &Scaled, rho: f64) -> Vec<f64> {
    (0..s.m())
        .map(|i| {
            if s.l[i] == s.u[i] {
                (rho * RHO_EQ_FACTOR).min(RHO_MAX)
            } else {
                rho
            }
        })
        .collect()
}

pub(super) fn solve(qp: &StandardQp, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.check()?;
    let start = Instant::now();
    let s = Scaled::new(qp, settings.scaling_iters);
    let (n, m) = (s.n(), s.m());
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let mut rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
    let mut rho_vec = rho_vector(&s, rho);
    let (kkt, diag_pos) = build_kkt(&s, sigma, &rho_vec);
    let mut factor = LdlFactor::new(&kkt)?;

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut x_prev = vec![0.0; n];
    let mut y_prev = vec![0.0; m];
    let mut rhs = vec![0.0; n + m];
    let mut ax = vec![0.0; m];
    let mut px = vec![0.0; n];
    let mut aty = vec![0.0; n];
    let mut dy = vec![0.0; m];
    let mut work = vec![0.0; n];

    let check_every = settings.check_every.max(1);
    let mut next_polish_gap = f64::INFINITY;
    let mut iter = 0;
    while iter < settings.max_iter {
        iter += 1;
        x_prev.copy_from_slice(&x);
        y_prev.copy_from_slice(&y);

        for j in 0..n {
            rhs[j] = sigma * x[j] - s.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho_vec[i];
        }
        factor.solve(&mut rhs);
        for j in 0..n {
            x[j] = alpha * rhs[j] + (1.0 - alpha) * x_prev[j];
        }
        for i in 0..m {
            let z_tilde = z[i] + (rhs[n + i] - y[i]) / rho_vec[i];
            let z_relax = alpha * z_tilde + (1.0 - alpha) * z[i];
            let z_new = (z_relax + y[i] / rho_vec[i]).clamp(s.l[i], s.u[i]);
            y[i] += rho_vec[i] * (z_relax - z_new);
            z[i] = z_new;
        }

        let adapt_now = settings.adaptive_rho && iter % ADAPT_EVERY == 0;
        if iter % check_every != 0 && !adapt_now && iter != settings.max_iter {
            continue;
        }
        let meas = measure(&s, &x, &z, &y, &mut ax, &mut px, &mut aty);
        let prim_ok = meas.prim <= settings.tol_feas;
        let dual_ok = meas.dual <= settings.tol_opt * meas.dual_scale.max(1.0);
        if prim_ok && dual_ok {
            let (zu, yu) = s.unscale(&x, &y);
            let sol = package(qp, QpStatus::Optimal, zu, yu, s.n_eq, iter, false, start);
            if sol.primal_residual <= settings.tol_feas && sol.dual_residual <= settings.tol_opt {
                return Ok(sol);
            }
        }

        for i in 0..m {
            dy[i] = y[i] - y_prev[i];
        }
        if infeasibility_certificate(&s, &dy, settings.eps_infeasible, &mut work) {
            let (zu, yu) = s.unscale(&x, &dy);
            return Ok(package(qp, QpStatus::Infeasible, zu, yu, s.n_eq, iter, false, start));
        }

        // Polish once the iterates are roughly right, and again each time the
        // residuals shrink by another decade.
        let gap = (meas.prim / (1.0 + meas.prim_scale)).max(meas.dual / (1.0 + meas.dual_scale));
        if settings.polish && gap <= 1e-3 && gap <= 0.1 * next_polish_gap {
            next_polish_gap = gap;
            if let Some((xp, yp)) = polish(&s, &z, &y) {
                let (zu, yu) = s.unscale(&xp, &yp);
                let sol = package(qp, QpStatus::Optimal, zu, yu, s.n_eq, iter, true, start);
                if sol.primal_residual <= settings.tol_feas
                    && sol.dual_residual <= settings.tol_opt
                    && r_sign_ok(&sol, settings.tol_opt)
                {
                    return Ok(sol);
                }
            }
        }

        if adapt_now {
            let p_rel = meas.prim / meas.prim_scale.max(1e-10);
            let d_rel = meas.dual / meas.dual_scale.max(1e-10);
            let new_rho = (rho * (p_rel / d_rel.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho.is_finite() && (new_rho > ADAPT_RATIO * rho || new_rho < rho / ADAPT_RATIO) {
                rho = new_rho;
                rho_vec = rho_vector(&s, rho);
                let vals: Vec<f64> = rho_vec.iter().map(|r| -1.0 / r).collect();
                factor.update_values(&diag_pos, &vals)?;
            }
        }
    }
    let (zu, yu) = s.unscale(&x, &y);
    Ok(package(qp, QpStatus::MaxIter, zu, yu, s.n_eq, iter, false, start))
}

fn r_sign_ok(sol: &QpSolution, tol: f64) -> bool {
    let scale = 1.0f64.max(max_abs(&sol.y_ineq));
    sol.y_ineq.iter().all(|&v| v >= -tol * scale)
}
