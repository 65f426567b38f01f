use serde::{Deserialize, Serialize};

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// row indices sorted within each column.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            count[c + 1] += 1;
        }
        for c in 0..ncols {
            count[c + 1] += count[c];
        }
        let mut next = count.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
        }
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval = Vec::with_capacity(triplets.len());
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(count[c]..count[c + 1]);
            order.sort_by_key(|&k| rows[k]);
            for &k in &order {
                if rowval.len() > colptr[c] && *rowval.last().unwrap() == rows[k] {
                    *nzval.last_mut().unwrap() += vals[k];
                } else {
                    rowval.push(rows[k]);
                    nzval.push(vals[k]);
                }
            }
            colptr[c + 1] = rowval.len();
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowval,
            nzval,
        }
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.colptr[c]..self.colptr[c + 1]).map(move |k| (self.rowval[k], self.nzval[k]))
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.ncols)
            .flat_map(|c| self.col(c).map(move |(r, v)| (r, c, v)))
            .collect()
    }

    /// `y += alpha * A x`.
    pub fn gemv(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc != 0.0 {
                for k in self.colptr[c]..self.colptr[c + 1] {
                    y[self.rowval[k]] += self.nzval[k] * xc;
                }
            }
        }
    }

    /// `y += alpha * Aᵀ x`.
    pub fn gemv_t(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.colptr[c]..self.colptr[c + 1] {
                acc += self.nzval[k] * x[self.rowval[k]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.gemv(1.0, x, &mut y);
        y
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.gemv_t(1.0, x, &mut y);
        y
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Self {
        assert_eq!(self.ncols, other.ncols);
        let mut t = self.triplets();
        t.extend(other.triplets().into_iter().map(|(r, c, v)| (r + self.nrows, c, v)));
        Self::from_triplets(self.nrows + other.nrows, self.ncols, &t)
    }

    /// Keeps only entries with `row ≤ col`.
    pub fn upper_triangle(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().filter(|&(r, c, _)| r <= c).collect();
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Scales as `diag(left) · A · diag(right)`.
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        for c in 0..self.ncols {
            for k in self.colptr[c]..self.colptr[c + 1] {
                self.nzval[k] *= left[self.rowval[k]] * right[c];
            }
        }
    }

    pub fn col_inf_norms(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|c| self.col(c).fold(0.0, |m, (_, v)| f64::max(m, v.abs())))
            .collect()
    }

    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.nrows];
        for (k, &r) in self.rowval.iter().enumerate() {
            out[r] = out[r].max(self.nzval[k].abs());
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let t = self.transpose();
        let diff = Self::from_triplets(
            self.nrows,
            self.ncols,
            &self
                .triplets()
                .into_iter()
                .chain(t.triplets().into_iter().map(|(r, c, v)| (r, c, -v)))
                .collect::<Vec<_>>(),
        );
        diff.nzval.iter().all(|v| v.abs() <= tol)
    }

    pub fn is_finite(&self) -> bool {
        self.nzval.iter().all(|v| v.is_finite())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}
