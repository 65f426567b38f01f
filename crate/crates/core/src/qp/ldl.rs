//! Sparse LDLᵀ for quasi-definite systems (up-looking, elimination-tree
//! based) with an approximate-minimum-degree fill-reducing permutation.
//!
//! Quasi-definite matrices admit an LDLᵀ factorization for every symmetric
//! permutation, so no numerical pivoting is done.

use super::csc::CscMatrix;
use super::QpError;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// `perm[k]` is the original index of pivot `k`.
    perm: Vec<usize>,
    /// Permuted upper triangle of the matrix being factored.
    pa: CscMatrix,
    /// `map[k]` locates entry `k` of the original upper triangle inside `pa`.
    map: Vec<usize>,
    etree: Vec<usize>,
    lnz: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    work: Vec<f64>,
    /// Expected pivot signs (in pivot order) for dynamic regularization.
    signs: Option<Vec<f64>>,
    reg_eps: f64,
    reg_delta: f64,
}

fn amd_order(upper: &CscMatrix) -> Vec<usize> {
    let n = upper.ncols;
    // Every diagonal entry is listed, which the ordering code's sanity checks
    // expect (nnz ≥ n).
    let mut ap = vec![0usize; n + 1];
    let mut ai = Vec::with_capacity(upper.nnz() + n);
    for c in 0..n {
        let mut has_diag = false;
        for (r, _) in upper.col(c) {
            has_diag |= r == c;
            ai.push(r);
        }
        if !has_diag {
            ai.push(c);
        }
        ap[c + 1] = ai.len();
    }
    match amd::order(n, &ap, &ai, &amd::Control::default()) {
        Ok((p, _, _)) => p,
        Err(_) => (0..n).collect(),
    }
}

/// Symmetric permutation of an upper-triangular CSC: returns `P A Pᵀ`
/// (upper part) and the position of every original entry in the result.
fn permute_upper(a: &CscMatrix, pinv: &[usize]) -> (CscMatrix, Vec<usize>) {
    let n = a.ncols;
    let mut count = vec![0usize; n + 1];
    for c in 0..n {
        for (r, _) in a.col(c) {
            let (i, j) = (pinv[r], pinv[c]);
            count[i.max(j) + 1] += 1;
        }
    }
    for c in 0..n {
        count[c + 1] += count[c];
    }
    let colptr = count.clone();
    let mut next = count;
    let mut rowval = vec![0usize; a.nnz()];
    let mut nzval = vec![0.0; a.nnz()];
    let mut map = vec![0usize; a.nnz()];
    for c in 0..n {
        for k in a.colptr[c]..a.colptr[c + 1] {
            let (i, j) = (pinv[a.rowval[k]], pinv[c]);
            let (row, col) = (i.min(j), i.max(j));
            let dst = next[col];
            next[col] += 1;
            rowval[dst] = row;
            nzval[dst] = a.nzval[k];
            map[k] = dst;
        }
    }
    (
        CscMatrix {
            nrows: n,
            ncols: n,
            colptr,
            rowval,
            nzval,
        },
        map,
    )
}

impl LdlFactor {
    /// Symbolic analysis plus numeric factorization of the upper triangle
    /// `upper` of a quasi-definite matrix.
    pub fn new(upper: &CscMatrix) -> Result<Self, QpError> {
        let mut f = Self::new_symbolic(upper)?;
        f.factor_numeric()?;
        Ok(f)
    }

    fn new_symbolic(upper: &CscMatrix) -> Result<Self, QpError> {
        let n = upper.ncols;
        let perm = amd_order(upper);
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        let (pa, map) = permute_upper(upper, &pinv);

        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![NONE; n];
        for j in 0..n {
            flag[j] = j;
            for (i0, _) in pa.col(j) {
                let mut i = i0;
                if i > j {
                    return Err(QpError::Numerical("KKT input is not upper triangular".into()));
                }
                while flag[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    flag[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        Ok(Self {
            n,
            perm,
            pa,
            map,
            etree,
            lnz,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            work: vec![0.0; n],
            signs: None,
            reg_eps: 0.0,
            reg_delta: 0.0,
        })
    }

    /// Like [`LdlFactor::new`], but any pivot whose sign disagrees with
    /// `signs[i]` (original ordering, `±1`) or whose magnitude is below `eps`
    /// is replaced by `signs[i] * delta`.
    pub fn with_regularization(upper: &CscMatrix, signs: &[f64], eps: f64, delta: f64) -> Result<Self, QpError> {
        let mut f = Self::new_symbolic(upper)?;
        f.signs = Some(f.perm.iter().map(|&p| signs[p]).collect());
        f.reg_eps = eps;
        f.reg_delta = delta;
        f.factor_numeric()?;
        Ok(f)
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    /// Replaces values of the original upper-triangle entries listed in
    /// `entries` (indices into the original CSC) and refactors.
    pub fn update_values(&mut self, entries: &[usize], values: &[f64]) -> Result<(), QpError> {
        for (&k, &v) in entries.iter().zip(values) {
            self.pa.nzval[self.map[k]] = v;
        }
        self.factor_numeric()
    }

    fn factor_numeric(&mut self) -> Result<(), QpError> {
        let n = self.n;
        let a = &self.pa;
        let mut y_vals = vec![0.0; n];
        let mut y_marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();

        for k in 0..n {
            self.d[k] = 0.0;
            let mut nnz_y = 0;
            for p in a.colptr[k]..a.colptr[k + 1] {
                let b = a.rowval[p];
                if b == k {
                    self.d[k] += a.nzval[p];
                    continue;
                }
                y_vals[b] += a.nzval[p];
                if !y_marked[b] {
                    y_marked[b] = true;
                    elim[0] = b;
                    let mut n_elim = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_marked[next] {
                            break;
                        }
                        y_marked[next] = true;
                        elim[n_elim] = next;
                        n_elim += 1;
                        next = self.etree[next];
                    }
                    while n_elim > 0 {
                        n_elim -= 1;
                        y_idx[nnz_y] = elim[n_elim];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let end = next_space[c];
                let yc = y_vals[c];
                for j in self.lp[c]..end {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[end] = k;
                let l = yc * self.dinv[c];
                self.lx[end] = l;
                self.d[k] -= yc * l;
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_marked[c] = false;
            }
            if let Some(signs) = &self.signs {
                if self.d[k] * signs[k] <= self.reg_eps {
                    self.d[k] = signs[k] * self.reg_delta;
                }
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(QpError::Numerical(format!("zero pivot at step {k} of LDLᵀ")));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        debug_assert!((0..n).all(|c| next_space[c] == self.lp[c] + self.lnz[c]));
        Ok(())
    }

    /// Solves `A x = b` in place.
    pub fn solve(&mut self, b: &mut [f64]) {
        let n = self.n;
        let x = &mut self.work;
        for k in 0..n {
            x[k] = b[self.perm[k]];
        }
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for k in 0..n {
            b[self.perm[k]] = x[k];
        }
    }

    /// Signs of the pivots: `(positive, negative)` counts.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        (pos, self.n - pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn upper_of(m: &DMatrix<f64>) -> CscMatrix {
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..=c {
                if m[(r, c)] != 0.0 || r == c {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        CscMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn solves_random_quasidefinite(n1 in 1usize..12, n2 in 0usize..10, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = n1 + n2;
            let mut sparse = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| {
                if rng.random_bool(0.35) { rng.random_range(-2.0..2.0) } else { 0.0 }
            });
            let g = sparse(n1, n1);
            let p = &g * g.transpose() + DMatrix::identity(n1, n1) * 0.1;
            let a = sparse(n2, n1);
            let mut k = DMatrix::zeros(n, n);
            k.view_mut((0, 0), (n1, n1)).copy_from(&p);
            k.view_mut((n1, 0), (n2, n1)).copy_from(&a);
            k.view_mut((0, n1), (n1, n2)).copy_from(&a.transpose());
            for i in 0..n2 { k[(n1 + i, n1 + i)] = -0.5; }
            let b = DVector::from_fn(n, |i, _| (i as f64).sin());
            let mut f = LdlFactor::new(&upper_of(&k)).unwrap();
            let mut x = b.as_slice().to_vec();
            f.solve(&mut x);
            let resid = &k * DVector::from_vec(x) - &b;
            prop_assert!(resid.amax() < 1e-8 * (1.0 + k.amax()));
            prop_assert_eq!(f.inertia(), (n1, n2));
        }
    }

    #[test]
    fn refactor_after_diagonal_update() {
        let k = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, -1.0]);
        let up = upper_of(&k);
        let mut f = LdlFactor::new(&up).unwrap();
        // last diagonal entry is the final stored value of column 2
        let last = up.colptr[3] - 1;
        f.update_values(&[last], &[-4.0]).unwrap();
        let mut k2 = k.clone();
        k2[(2, 2)] = -4.0;
        let mut x = vec![1.0, 2.0, 3.0];
        f.solve(&mut x);
        let r = &k2 * DVector::from_vec(x) - DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(r.amax() < 1e-12);
    }
}
