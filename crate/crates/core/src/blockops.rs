//! Finite-horizon causal operators stored as block-lower-triangular grids.
//!
//! Blocks are addressed by absolute `(row, col)` with `col ≤ row`. The
//! offset convention, where block `(t, k)` is written with superscript
//! `(t, t-k)`, is available through [`BltMatrix::block_at_offset`].

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};

use crate::error::{dim_err, Result};
use crate::model::{TimeDelaySystem, UncertaintyVertex};

#[inline]
pub(crate) fn tri_index(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

/// Number of blocks on and below the diagonal for horizon `T`.
pub fn blt_block_count(horizon: usize) -> usize {
    (horizon + 1) * (horizon + 2) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct BltMatrix {
    horizon: usize,
    block_rows: usize,
    block_cols: usize,
    blocks: Vec<Option<DMatrix<f64>>>,
}

impl BltMatrix {
    pub fn zeros(horizon: usize, block_rows: usize, block_cols: usize) -> Self {
        Self {
            horizon,
            block_rows,
            block_cols,
            blocks: vec![None; blt_block_count(horizon)],
        }
    }

    pub fn identity(horizon: usize, n: usize) -> Self {
        let mut m = Self::zeros(horizon, n, n);
        for t in 0..=horizon {
            m.blocks[tri_index(t, t)] = Some(DMatrix::identity(n, n));
        }
        m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    /// Stored block at `(row, col)`; `None` for absent (zero) or upper blocks.
    pub fn block(&self, row: usize, col: usize) -> Option<&DMatrix<f64>> {
        if col > row || row > self.horizon {
            return None;
        }
        self.blocks[tri_index(row, col)].as_ref()
    }

    pub fn block_or_zero(&self, row: usize, col: usize) -> DMatrix<f64> {
        self.block(row, col)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.block_rows, self.block_cols))
    }

    /// Block written `R^{row, offset}` in offset notation, i.e. absolute
    /// column `row - offset`.
    pub fn block_at_offset(&self, row: usize, offset: usize) -> Option<&DMatrix<f64>> {
        row.checked_sub(offset).and_then(|col| self.block(row, col))
    }

    pub fn set_block(&mut self, row: usize, col: usize, m: DMatrix<f64>) -> Result<()> {
        if col > row || row > self.horizon {
            return Err(dim_err(format!(
                "block ({row}, {col}) is outside the lower triangle of horizon {}",
                self.horizon
            )));
        }
        if m.nrows() != self.block_rows || m.ncols() != self.block_cols {
            return Err(dim_err(format!(
                "block is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                self.block_rows,
                self.block_cols
            )));
        }
        self.blocks[tri_index(row, col)] = Some(m);
        Ok(())
    }

    fn add_block(&mut self, row: usize, col: usize, m: &DMatrix<f64>) {
        match &mut self.blocks[tri_index(row, col)] {
            Some(b) => *b += m,
            slot => *slot = Some(m.clone()),
        }
    }

    /// Iterates over stored blocks as `(row, col, block)`.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        (0..=self.horizon)
            .flat_map(move |r| (0..=r).filter_map(move |c| self.blocks[tri_index(r, c)].as_ref().map(|b| (r, c, b))))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (p, q) = (self.block_rows, self.block_cols);
        let n = self.horizon + 1;
        let mut out = DMatrix::zeros(n * p, n * q);
        for (r, c, b) in self.iter_blocks() {
            out.view_mut((r * p, c * q), (p, q)).copy_from(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_blocks().map(|(_, _, b)| b.amax()).fold(0.0, f64::max)
    }

    pub fn is_strictly_lower(&self) -> bool {
        (0..=self.horizon).all(|t| self.block(t, t).is_none_or(|b| b.iter().all(|&v| v == 0.0)))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for b in out.blocks.iter_mut().flatten() {
            *b *= s;
        }
        out
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.horizon != other.horizon || self.block_rows != other.block_rows || self.block_cols != other.block_cols {
            return Err(dim_err(format!(
                "BLT shapes differ: (T={}, {}x{}) vs (T={}, {}x{})",
                self.horizon, self.block_rows, self.block_cols, other.horizon, other.block_rows, other.block_cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (r, c, b) in other.iter_blocks() {
            out.add_block(r, c, b);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    /// `self · s` for a stacked signal with block size `block_cols`.
    pub fn apply(&self, s: &StackedSignal) -> Result<StackedSignal> {
        if s.horizon != self.horizon || s.block_dim != self.block_cols {
            return Err(dim_err(format!(
                "cannot apply (T={}, {}x{}) operator to signal (T={}, n={})",
                self.horizon, self.block_rows, self.block_cols, s.horizon, s.block_dim
            )));
        }
        let mut out = StackedSignal::zeros(self.horizon, self.block_rows);
        for (r, c, b) in self.iter_blocks() {
            out.block_mut(r).gemv(1.0, b, &s.block(c), 1.0);
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.horizon != other.horizon || self.block_cols != other.block_rows {
            return Err(dim_err(format!(
                "cannot compose (T={}, {}x{}) with (T={}, {}x{})",
                self.horizon, self.block_rows, self.block_cols, other.horizon, other.block_rows, other.block_cols
            )));
        }
        let mut out = Self::zeros(self.horizon, self.block_rows, other.block_cols);
        for (r, k, a) in self.iter_blocks() {
            for c in 0..=k {
                if let Some(b) = other.block(k, c) {
                    out.add_block(r, c, &(a * b));
                }
            }
        }
        Ok(out)
    }

    /// Solves `(I - self) y = rhs` by block forward substitution. `self` must
    /// be square-blocked and strictly lower.
    pub fn solve_i_minus(&self, rhs: &StackedSignal) -> Result<StackedSignal> {
        if self.block_rows != self.block_cols {
            return Err(dim_err("(I - M) solve needs square blocks"));
        }
        if !self.is_strictly_lower() {
            return Err(dim_err("(I - M) solve needs a strictly lower M"));
        }
        if rhs.horizon != self.horizon || rhs.block_dim != self.block_rows {
            return Err(dim_err("right-hand side does not conform"));
        }
        let mut y = rhs.clone();
        for r in 1..=self.horizon {
            let mut acc = y.block(r).clone_owned();
            for c in 0..r {
                if let Some(b) = self.block(r, c) {
                    acc.gemv(1.0, b, &y.block(c), 1.0);
                }
            }
            y.block_mut(r).copy_from(&acc);
        }
        Ok(y)
    }

    /// Solves `self · y = rhs` by forward substitution; diagonal blocks must
    /// be invertible.
    pub fn solve_lower(&self, rhs: &StackedSignal) -> Result<StackedSignal> {
        if self.block_rows != self.block_cols || rhs.horizon != self.horizon || rhs.block_dim != self.block_rows {
            return Err(dim_err("lower solve does not conform"));
        }
        let mut y = StackedSignal::zeros(self.horizon, self.block_rows);
        for r in 0..=self.horizon {
            let mut acc = rhs.block(r).clone_owned();
            for c in 0..r {
                if let Some(b) = self.block(r, c) {
                    acc.gemv(-1.0, b, &y.block(c), 1.0);
                }
            }
            let diag = self
                .block(r, r)
                .ok_or_else(|| dim_err(format!("diagonal block {r} is zero")))?;
            let sol = diag
                .clone()
                .lu()
                .solve(&acc)
                .ok_or_else(|| dim_err(format!("diagonal block {r} is singular")))?;
            y.block_mut(r).copy_from(&sol);
        }
        Ok(y)
    }

    /// Finds the BLT `X` with `X · self = rhs` (block-column back substitution).
    /// Diagonal blocks of `self` must be invertible.
    pub fn right_divide(rhs: &Self, denom: &Self) -> Result<Self> {
        if denom.block_rows != denom.block_cols || rhs.horizon != denom.horizon || rhs.block_cols != denom.block_rows {
            return Err(dim_err("right division does not conform"));
        }
        let t_max = denom.horizon;
        let inv_diag = (0..=t_max)
            .map(|t| {
                denom
                    .block(t, t)
                    .and_then(|d| d.clone().try_inverse())
                    .ok_or_else(|| dim_err(format!("diagonal block {t} is singular")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::zeros(t_max, rhs.block_rows, rhs.block_cols);
        for r in 0..=t_max {
            for c in (0..=r).rev() {
                let mut acc = rhs.block_or_zero(r, c);
                for k in c + 1..=r {
                    if let (Some(x), Some(d)) = (out.block(r, k), denom.block(k, c)) {
                        acc -= x * d;
                    }
                }
                out.blocks[tri_index(r, c)] = Some(acc * &inv_diag[c]);
            }
        }
        Ok(out)
    }
}

/// Block down-shift `Z`: identity blocks at `(t, t-1)`.
pub fn shift_operator(horizon: usize, n: usize) -> BltMatrix {
    let mut z = BltMatrix::zeros(horizon, n, n);
    for t in 1..=horizon {
        z.blocks[tri_index(t, t - 1)] = Some(DMatrix::identity(n, n));
    }
    z
}

/// Signal over `t = 0..=T` with blocks of size `block_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSignal {
    pub horizon: usize,
    pub block_dim: usize,
    pub data: DVector<f64>,
}

impl StackedSignal {
    pub fn zeros(horizon: usize, block_dim: usize) -> Self {
        Self {
            horizon,
            block_dim,
            data: DVector::zeros((horizon + 1) * block_dim),
        }
    }

    pub fn from_blocks(blocks: &[DVector<f64>]) -> Result<Self> {
        let n = blocks
            .first()
            .map(|b| b.len())
            .ok_or_else(|| dim_err("a stacked signal needs at least one block"))?;
        if blocks.iter().any(|b| b.len() != n) {
            return Err(dim_err("stacked signal blocks differ in length"));
        }
        let mut s = Self::zeros(blocks.len() - 1, n);
        for (t, b) in blocks.iter().enumerate() {
            s.block_mut(t).copy_from(b);
        }
        Ok(s)
    }

    pub fn block(&self, t: usize) -> DVectorView<'_, f64> {
        self.data.rows(t * self.block_dim, self.block_dim)
    }

    pub fn block_mut(&mut self, t: usize) -> DVectorViewMut<'_, f64> {
        self.data.rows_mut(t * self.block_dim, self.block_dim)
    }

    pub fn blocks(&self) -> Vec<DVector<f64>> {
        (0..=self.horizon).map(|t| self.block(t).clone_owned()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }
}

/// Compact block representation of the delayed dynamics over a horizon.
///
/// `a`/`b` act on the in-horizon signals and have a zero last block row;
/// `a_minus`/`b_minus` act on the stacked pre-horizon history.
#[derive(Debug, Clone)]
pub struct DelayBlocks {
    pub a: BltMatrix,
    pub b: BltMatrix,
    pub a_minus: DMatrix<f64>,
    pub b_minus: DMatrix<f64>,
}

fn check_lagged(mats: &[DMatrix<f64>], rows: usize, cols: usize, name: &str) -> Result<()> {
    for (i, m) in mats.iter().enumerate() {
        if m.nrows() != rows || m.ncols() != cols {
            return Err(dim_err(format!(
                "{name}[{i}] is {}x{}, expected {rows}x{cols}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

/// Places lag matrices `mats[0..=delay]` on the diagonal and subdiagonals of
/// block rows `0..T` (row `T` stays zero) and builds the history operator
/// whose row `t` holds `mats[t+delay-c]` at history column `c ≥ t`.
fn lagged_blocks(mats: &[DMatrix<f64>], horizon: usize) -> (BltMatrix, DMatrix<f64>) {
    let (p, q) = (mats[0].nrows(), mats[0].ncols());
    let delay = mats.len() - 1;
    let mut blt = BltMatrix::zeros(horizon, p, q);
    for r in 0..horizon {
        for (i, m) in mats.iter().enumerate().take(r.min(delay) + 1) {
            blt.blocks[tri_index(r, r - i)] = Some(m.clone());
        }
    }
    let mut minus = DMatrix::zeros((horizon + 1) * p, delay * q);
    for r in 0..delay.min(horizon) {
        for c in r..delay {
            minus.view_mut((r * p, c * q), (p, q)).copy_from(&mats[r + delay - c]);
        }
    }
    (blt, minus)
}

fn delay_blocks(
    a_mats: &[DMatrix<f64>],
    b_mats: &[DMatrix<f64>],
    nx: usize,
    nu: usize,
    horizon: usize,
    what: &str,
) -> Result<DelayBlocks> {
    if a_mats.is_empty() || b_mats.is_empty() {
        return Err(dim_err(format!("{what}: lag lists must be nonempty")));
    }
    check_lagged(a_mats, nx, nx, &format!("{what} A"))?;
    check_lagged(b_mats, nx, nu, &format!("{what} B"))?;
    let (a, a_minus) = lagged_blocks(a_mats, horizon);
    let (b, b_minus) = lagged_blocks(b_mats, horizon);
    Ok(DelayBlocks { a, b, a_minus, b_minus })
}

pub fn build_nominal_blocks(sys: &TimeDelaySystem, horizon: usize) -> Result<DelayBlocks> {
    delay_blocks(&sys.a_nom, &sys.b_nom, sys.nx, sys.nu, horizon, "nominal")
}

pub fn build_delta_blocks(vertex: &UncertaintyVertex, nx: usize, nu: usize, horizon: usize) -> Result<DelayBlocks> {
    delay_blocks(&vertex.d_a, &vertex.d_b, nx, nu, horizon, "vertex")
}

/// Stacks `x_{-na}..x_{-1}` (history without `x_0`) and `u_{-nb}..u_{-1}`.
pub fn stack_history(
    sys: &TimeDelaySystem,
    x_hist: &[DVector<f64>],
    u_hist: &[DVector<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x_hist.len() != sys.na + 1 || u_hist.len() != sys.nb {
        return Err(dim_err(format!(
            "history lengths ({}, {}) do not match delays (na+1 = {}, nb = {})",
            x_hist.len(),
            u_hist.len(),
            sys.na + 1,
            sys.nb
        )));
    }
    if x_hist.iter().any(|x| x.len() != sys.nx) || u_hist.iter().any(|u| u.len() != sys.nu) {
        return Err(dim_err("history vectors have the wrong dimension"));
    }
    let mut xm = DVector::zeros(sys.na * sys.nx);
    for (i, x) in x_hist[..sys.na].iter().enumerate() {
        xm.rows_mut(i * sys.nx, sys.nx).copy_from(x);
    }
    let mut um = DVector::zeros(sys.nb * sys.nu);
    for (j, u) in u_hist.iter().enumerate() {
        um.rows_mut(j * sys.nu, sys.nu).copy_from(u);
    }
    Ok((xm, um))
}

/// Shifts a plain `(T+1)·n` vector down by one block.
pub(crate) fn shift_vector(v: &DVector<f64>, horizon: usize, n: usize) -> StackedSignal {
    let mut out = StackedSignal::zeros(horizon, n);
    out.data.rows_mut(n, horizon * n).copy_from(&v.rows(0, horizon * n));
    out
}

/// Delay offsets: `d = Z(Â⁻x⁻ + B̂⁻u⁻)` and `h = (I - ZÂ)⁻¹ d`, the latter
/// by forward substitution.
pub fn compute_offset(
    sys: &TimeDelaySystem,
    horizon: usize,
    x_hist: &[DVector<f64>],
    u_hist: &[DVector<f64>],
) -> Result<(StackedSignal, StackedSignal)> {
    let blocks = build_nominal_blocks(sys, horizon)?;
    let (xm, um) = stack_history(sys, x_hist, u_hist)?;
    let raw = &blocks.a_minus * &xm + &blocks.b_minus * &um;
    let d = shift_vector(&raw, horizon, sys.nx);
    let za = shift_operator(horizon, sys.nx).compose(&blocks.a)?;
    let h = za.solve_i_minus(&d)?;
    Ok((d, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_system(a: f64, c: f64) -> TimeDelaySystem {
        TimeDelaySystem {
            nx: 1,
            nu: 1,
            na: 1,
            nb: 0,
            a_nom: vec![scalar(a), scalar(c)],
            b_nom: vec![scalar(0.0)],
            vertices: vec![UncertaintyVertex::zeros(1, 1, 1, 0)],
            sigma_w: 0.0,
        }
    }

    #[test]
    fn shift_structure() {
        let z = shift_operator(1, 2);
        assert_eq!(z.block(1, 0).unwrap(), &DMatrix::<f64>::identity(2, 2));
        assert!(z.block(0, 0).is_none() && z.block(1, 1).is_none());
        assert_eq!(shift_operator(0, 3).to_dense(), DMatrix::<f64>::zeros(3, 3));

        let z = shift_operator(2, 1);
        let s = StackedSignal::from_blocks(&[
            DVector::from_element(1, 3.0),
            DVector::from_element(1, 4.0),
            DVector::from_element(1, 5.0),
        ])
        .unwrap();
        let zz = z.apply(&z.apply(&s).unwrap()).unwrap();
        assert_eq!(zz.data.as_slice(), &[0.0, 0.0, 3.0]);
        assert_eq!(z.compose(&z).unwrap().apply(&s).unwrap(), zz);
    }

    #[test]
    fn scalar_nominal_blocks_by_hand() {
        let (a, c) = (0.7, -1.3);
        let blocks = build_nominal_blocks(&scalar_system(a, c), 2).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[a, 0.0, 0.0, c, a, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(blocks.a.to_dense(), expected);
        assert_eq!(blocks.a_minus, DMatrix::from_column_slice(3, 1, &[c, 0.0, 0.0]));
        assert_eq!(blocks.b_minus.ncols(), 0);
    }

    #[test]
    fn no_delay_gives_block_diagonal() {
        let p = presets::scalar_integrator(0.0, 0.0, 3);
        let blocks = build_nominal_blocks(&p.system, 3).unwrap();
        let d = blocks.a.to_dense();
        assert_eq!(d, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0])));
        assert_eq!(blocks.a_minus.ncols(), 0);
    }

    #[test]
    fn truck_trailer_band() {
        let p = presets::truck_trailer();
        let blocks = build_nominal_blocks(&p.system, 6).unwrap();
        for r in 0..=6usize {
            for c in 0..=r {
                let blk = blocks.a.block(r, c);
                let expect = match (r < 6, r - c) {
                    (true, 0) => Some(&p.system.a_nom[0]),
                    (true, 3) => Some(&p.system.a_nom[3]),
                    _ => None,
                };
                match (blk, expect) {
                    (Some(b), Some(e)) => assert_eq!(b, e),
                    (Some(b), None) => assert_eq!(b.amax(), 0.0, "({r},{c})"),
                    (None, Some(e)) => assert_eq!(e.amax(), 0.0, "({r},{c})"),
                    (None, None) => {}
                }
            }
        }
        // History operator: row 0 = [Â3 Â2 Â1], row 1 = [0 Â3 Â2], row 2 = [0 0 Â3].
        let am = &blocks.a_minus;
        assert_eq!(am.view((0, 0), (3, 3)), p.system.a_nom[3]);
        assert_eq!(am.view((3, 3), (3, 3)), p.system.a_nom[3]);
        assert_eq!(am.view((6, 6), (3, 3)), p.system.a_nom[3]);
        assert_eq!(am.rows(9, 12).amax(), 0.0);
    }

    #[test]
    fn delta_blocks_mirror_nominal() {
        let v = UncertaintyVertex {
            d_a: vec![scalar(0.2), scalar(-0.4)],
            d_b: vec![scalar(0.0)],
        };
        let blocks = build_delta_blocks(&v, 1, 1, 2).unwrap();
        assert_eq!(
            blocks.a.to_dense(),
            DMatrix::from_row_slice(3, 3, &[0.2, 0.0, 0.0, -0.4, 0.2, 0.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(blocks.a_minus[(0, 0)], -0.4);

        let zero = build_delta_blocks(&UncertaintyVertex::zeros(2, 1, 2, 1), 2, 1, 4).unwrap();
        assert_eq!(zero.a.max_abs() + zero.b.max_abs(), 0.0);
        assert_eq!(zero.a_minus.amax().max(zero.b_minus.amax()), 0.0);

        let sys = presets::random_scalability(3, 1, 13, &mut rand::rng());
        let sixtwo = build_delta_blocks(&sys.system.vertices[1], 2, 1, 13).unwrap();
        let diag = DMatrix::from_row_slice(2, 2, &[-0.1, 0.0, 0.0, 0.0]);
        for r in 0..13usize {
            for lag in 0..=r.min(3) {
                assert_eq!(sixtwo.a.block(r, r - lag).unwrap(), &diag);
            }
        }
    }

    #[test]
    fn scalar_offset_by_hand() {
        let (a, c, xm1) = (0.9, 0.4, 2.5);
        let sys = scalar_system(a, c);
        let hist = [DVector::from_element(1, xm1), DVector::from_element(1, 1.0)];
        let (d, h) = compute_offset(&sys, 2, &hist, &[]).unwrap();
        assert_eq!(d.data.as_slice(), &[0.0, c * xm1, 0.0]);
        let expect = [0.0, c * xm1, a * c * xm1];
        for (got, want) in h.data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_history_zero_offset() {
        let p = presets::truck_trailer();
        let (d, h) = compute_offset(&p.system, 6, &p.x_hist, &p.u_hist).unwrap();
        assert_eq!(d.max_abs(), 0.0);
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn identity_apply() {
        let s = StackedSignal::from_blocks(&[DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![3.0, 0.5])])
            .unwrap();
        assert_eq!(BltMatrix::identity(1, 2).apply(&s).unwrap(), s);
    }

    #[test]
    fn upper_blocks_rejected() {
        let mut m = BltMatrix::zeros(2, 1, 1);
        assert!(m.set_block(0, 1, scalar(1.0)).is_err());
        assert!(m.set_block(1, 0, DMatrix::zeros(2, 1)).is_err());
    }

    fn random_system(nx: usize, nu: usize, na: usize, nb: usize, seed: u64) -> TimeDelaySystem {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
        TimeDelaySystem {
            nx,
            nu,
            na,
            nb,
            a_nom: (0..=na).map(|_| m(nx, nx)).collect(),
            b_nom: (0..=nb).map(|_| m(nx, nu)).collect(),
            vertices: vec![UncertaintyVertex::zeros(nx, nu, na, nb)],
            sigma_w: 0.0,
        }
    }

    fn random_history(sys: &TimeDelaySystem, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let xh = (0..=sys.na)
            .map(|_| DVector::from_fn(sys.nx, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        let uh = (0..sys.nb)
            .map(|_| DVector::from_fn(sys.nu, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        (xh, uh)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn offset_residual_and_linearity(
            nx in 1usize..4, nu in 1usize..3, na in 0usize..5, nb in 0usize..5,
            extra in 1usize..10, seed in any::<u64>(),
        ) {
            let horizon = (na.max(nb) + extra).min(20);
            let sys = random_system(nx, nu, na, nb, seed);
            let (xh, uh) = random_history(&sys, seed);
            let (d, h) = compute_offset(&sys, horizon, &xh, &uh).unwrap();
            prop_assert!(h.block(0).amax() == 0.0);

            // (I - Z Â) h = d, checked with a dense product.
            let blocks = build_nominal_blocks(&sys, horizon).unwrap();
            let n = (horizon + 1) * nx;
            let za = shift_operator(horizon, nx).to_dense() * blocks.a.to_dense();
            let resid = (DMatrix::<f64>::identity(n, n) - za) * &h.data - &d.data;
            prop_assert!(resid.amax() <= 1e-10 * (1.0 + h.max_abs()));

            // last block row of Â is zero
            for c in 0..=horizon {
                prop_assert!(blocks.a.block(horizon, c).is_none_or(|b| b.amax() == 0.0));
            }

            let xh2: Vec<_> = xh.iter().map(|x| x * 2.0).collect();
            let uh2: Vec<_> = uh.iter().map(|u| u * 2.0).collect();
            let (d2, h2) = compute_offset(&sys, horizon, &xh2, &uh2).unwrap();
            prop_assert_eq!(d2.data, &d.data * 2.0);
            prop_assert_eq!(h2.data, &h.data * 2.0);
        }

        #[test]
        fn compose_stays_lower(t in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand_blt = |p, q| {
                let mut m = BltMatrix::zeros(t, p, q);
                for r in 0..=t { for c in 0..=r {
                    if rng.random_bool(0.7) {
                        m.set_block(r, c, DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0))).unwrap();
                    }
                }}
                m
            };
            let a = rand_blt(2, 3);
            let b = rand_blt(3, 2);
            let ab = a.compose(&b).unwrap();
            let dense = a.to_dense() * b.to_dense();
            prop_assert!((ab.to_dense() - &dense).amax() < 1e-12);
            // strictly-upper part of the dense product is zero
            for r in 0..=t { for c in r + 1..=t {
                prop_assert_eq!(dense.view((r * 2, c * 2), (2, 2)).amax(), 0.0);
            }}
        }
    }

    #[test]
    fn right_divide_inverts_product() {
        let mut den = BltMatrix::zeros(3, 2, 2);
        let mut num = BltMatrix::zeros(3, 1, 2);
        for r in 0..=3usize {
            for c in 0..=r {
                let d = if r == c {
                    DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 + r as f64, 0.5]))
                } else {
                    DMatrix::from_fn(2, 2, |i, j| (i + 2 * j + r + c) as f64 * 0.1)
                };
                den.set_block(r, c, d).unwrap();
                num.set_block(r, c, DMatrix::from_fn(1, 2, |_, j| (r * 3 + c + j) as f64))
                    .unwrap();
            }
        }
        let k = BltMatrix::right_divide(&num, &den).unwrap();
        assert!((k.compose(&den).unwrap().to_dense() - num.to_dense()).amax() < 1e-12);
    }
}
