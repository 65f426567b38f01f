//! Active-set polishing: guess the active constraints from an ADMM iterate,
//! solve the resulting equality-constrained QP exactly and refine.

use super::admm::Scaled;
use super::csc::CscMatrix;
use super::ldl::LdlFactor;

const DELTA: f64 = 1e-6;
const REFINE_ITERS: usize = 25;

/// Returns a polished scaled pair `(x, y)`, or `None` when the reduced
/// system cannot be factored.
pub(super) fn polish(s: &Scaled, z: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = s.n();
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..s.m() {
        if s.l[i] == s.u[i] || s.u[i] - z[i] < y[i] {
            active.push(i);
            target.push(s.u[i]);
        } else if z[i] - s.l[i] < -y[i] {
            active.push(i);
            target.push(s.l[i]);
        }
    }
    let k = active.len();
    let mut row_of = vec![usize::MAX; s.m()];
    for (r, &i) in active.iter().enumerate() {
        row_of[i] = r;
    }
    // Reduced constraint matrix, stored by column like Ā.
    let mut red = Vec::new();
    for (r, c, v) in s.a.triplets() {
        if row_of[r] != usize::MAX {
            red.push((row_of[r], c, v));
        }
    }
    let a_red = CscMatrix::from_triplets(k, n, &red);

    let mut t = s.p_upper.triplets();
    t.extend((0..n).map(|j| (j, j, DELTA)));
    t.extend(a_red.triplets().into_iter().map(|(r, c, v)| (c, n + r, v)));
    t.extend((0..k).map(|r| (n + r, n + r, -DELTA)));
    let kkt = CscMatrix::from_triplets(n + k, n + k, &t);
    let mut factor = match LdlFactor::new(&kkt) {
        Ok(f) => f,
        Err(_) => return None,
    };

    let rhs: Vec<f64> = s.q.iter().map(|v| -v).chain(target.iter().copied()).collect();
    let mut sol = rhs.clone();
    factor.solve(&mut sol);

    // Iterative refinement against the unregularized system.
    let mut resid = vec![0.0; n + k];
    for _ in 0..REFINE_ITERS {
        resid.copy_from_slice(&rhs);
        let (xs, ys) = sol.split_at(n);
        let mut top = vec![0.0; n];
        s.p_full.gemv(1.0, xs, &mut top);
        a_red.gemv_t(1.0, ys, &mut top);
        let mut bottom = vec![0.0; k];
        a_red.gemv(1.0, xs, &mut bottom);
        for j in 0..n {
            resid[j] -= top[j];
        }
        for r in 0..k {
            resid[n + r] -= bottom[r];
        }
        let err = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err < 1e-14 {
            break;
        }
        factor.solve(&mut resid);
        for (s, d) in sol.iter_mut().zip(&resid) {
            *s += d;
        }
    }

    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol[..n].to_vec();
    let mut yp = vec![0.0; s.m()];
    for (r, &i) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    Some((xp, yp))
}
