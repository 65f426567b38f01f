//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tdsls::model::OcpProblem;
use tdsls::qp::CscMatrix;
use tdsls::synthesis::{AssembledQp, AuxTag, FilterMode, VarTag};

/// Linear form over named variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Form {
    pub terms: BTreeMap<VarTag, f64>,
    pub constant: f64,
}

impl Form {
    pub fn var(tag: VarTag) -> Self {
        let mut f = Self::default();
        f.terms.insert(tag, 1.0);
        f
    }

    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            ..Self::default()
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Form) {
        for (t, v) in &other.terms {
            *self.terms.entry(*t).or_insert(0.0) += s * v;
        }
        self.constant += s * other.constant;
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = Self::default();
        out.axpy(s, self);
        out
    }

    fn tidy(mut self) -> Self {
        self.terms.retain(|_, v| *v != 0.0);
        self
    }
}

/// Dense matrix of linear forms.
pub type FormMat = Vec<Vec<Form>>;

fn mat_of(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Form) -> FormMat {
    (0..rows).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect()
}

/// `M · X` for a numeric `M`.
fn left_mul(m: &nalgebra::DMatrix<f64>, x: &FormMat) -> FormMat {
    let cols = x.first().map_or(0, |r| r.len());
    mat_of(m.nrows(), cols, |i, j| {
        let mut f = Form::default();
        for (k, row) in x.iter().enumerate() {
            f.axpy(m[(i, k)], &row[j]);
        }
        f
    })
}

fn add(a: &FormMat, b: &FormMat, s: f64) -> FormMat {
    mat_of(a.len(), a[0].len(), |i, j| {
        let mut f = a[i][j].clone();
        f.axpy(s, &b[i][j]);
        f
    })
}

/// Row of a constraint block: `form = 0` or `form ≤ 0`.
pub type Row = Form;

/// Constraint rows of the robust OCP for a system without delays, written
/// directly from the textbook recursion `Φₓ(k+1) = AΦₓ(k) + BΦᵤ(k) + Σ(k+1)`.
pub struct Reference {
    pub eq: Vec<Row>,
    pub ineq: Vec<Row>,
}

pub fn reference_rows(problem: &OcpProblem, filter: FilterMode, q_min: f64) -> Reference {
    let sys = &problem.system;
    assert_eq!((sys.na, sys.nb), (0, 0));
    let (nx, nu, horizon) = (sys.nx, sys.nu, problem.horizon);
    let (a, b) = (&sys.a_nom[0], &sys.b_nom[0]);
    let x0 = problem.x0();

    let phi_x = |r: usize, c: usize| mat_of(nx, nx, |i, j| Form::var(VarTag::PhiX { r, c, i, j }));
    let phi_u = |r: usize, c: usize| mat_of(nu, nx, |i, j| Form::var(VarTag::PhiU { r, c, i, j }));
    let sigma_sub = |r: usize, c: usize| {
        mat_of(nx, nx, |i, j| {
            let free = match filter {
                FilterMode::Full => true,
                FilterMode::Anchored => c > 0,
                FilterMode::DiagOnly => false,
            };
            if free {
                Form::var(VarTag::SigmaSub { r, c, i, j })
            } else {
                Form::default()
            }
        })
    };
    let sigma = |r: usize, c: usize| {
        if r == 0 {
            mat_of(nx, nx, |i, j| Form::constant(if i == j { 1.0 } else { 0.0 }))
        } else if r == c {
            mat_of(nx, nx, |i, j| {
                if i == j {
                    Form::var(VarTag::Q { t: r - 1, i })
                } else {
                    Form::default()
                }
            })
        } else {
            sigma_sub(r, c)
        }
    };

    let mut eq = Vec::new();
    for r in 0..=horizon {
        for c in 0..=r {
            let lhs = if r == c {
                phi_x(r, c)
            } else {
                let prop = add(&left_mul(a, &phi_x(r - 1, c)), &left_mul(b, &phi_u(r - 1, c)), 1.0);
                add(&phi_x(r, c), &prop, -1.0)
            };
            let res = add(&lhs, &sigma(r, c), -1.0);
            eq.extend(res.into_iter().flatten());
        }
    }

    let mut ineq = Vec::new();
    let epigraph = |ineq: &mut Vec<Row>, f: &Form, tag: AuxTag| -> Form {
        let s = Form::var(VarTag::Aux(tag));
        let mut up = f.clone();
        up.axpy(-1.0, &s);
        let mut down = f.scaled(-1.0);
        down.axpy(-1.0, &s);
        ineq.push(up);
        ineq.push(down);
        s
    };

    for t in 0..horizon {
        for i in 0..nx {
            let mut f = Form::constant(q_min);
            f.axpy(-1.0, &Form::var(VarTag::Q { t, i }));
            ineq.push(f);
        }
    }

    for (l, v) in sys.vertices.iter().enumerate() {
        let c_blk = |r: usize, c: usize| {
            let prop = add(
                &left_mul(&v.d_a[0], &phi_x(r - 1, c)),
                &left_mul(&v.d_b[0], &phi_u(r - 1, c)),
                1.0,
            );
            add(&prop, &sigma_sub(r, c), -1.0)
        };
        for t in 0..horizon {
            let c0 = c_blk(t + 1, 0);
            for i in 0..nx {
                let mut vt = Form::default();
                for m in 0..nx {
                    vt.axpy(x0[m], &c0[i][m]);
                }
                let mut row = Form::constant(sys.sigma_w);
                row.axpy(1.0, &epigraph(&mut ineq, &vt, AuxTag::OverV { l, t, i }));
                for j in 1..=t {
                    let cj = c_blk(t + 1, j);
                    for m in 0..nx {
                        let tag = AuxTag::OverC { l, t, i, j, m };
                        row.axpy(1.0, &epigraph(&mut ineq, &cj[i][m], tag));
                    }
                }
                row.axpy(-1.0, &Form::var(VarTag::Q { t, i }));
                ineq.push(row);
            }
        }
    }

    let tighten = |ineq: &mut Vec<Row>, t: usize, set: &tdsls::model::PolytopeSet, state: bool| {
        for (facet, (f, bound)) in set.facets().enumerate() {
            let blk = |c: usize| if state { phi_x(t, c) } else { phi_u(t, c) };
            let nominal = blk(0);
            let mut row = Form::constant(-bound);
            for (i, fi) in f.iter().enumerate() {
                for m in 0..nx {
                    row.axpy(fi * x0[m], &nominal[i][m]);
                }
            }
            for j in 1..=t {
                let bj = blk(j);
                for m in 0..nx {
                    let mut e = Form::default();
                    for (i, fi) in f.iter().enumerate() {
                        e.axpy(*fi, &bj[i][m]);
                    }
                    let tag = if state {
                        AuxTag::StateL1 { facet, t, j, m }
                    } else {
                        AuxTag::InputL1 { facet, t, j, m }
                    };
                    row.axpy(1.0, &epigraph(ineq, &e, tag));
                }
            }
            ineq.push(row);
        }
    };
    for t in 0..=horizon {
        if let Some(set) = problem.state_set_at(t) {
            tighten(&mut ineq, t, set, true);
        }
    }
    for t in 0..horizon {
        tighten(&mut ineq, t, &problem.u_set, false);
    }

    Reference {
        eq: eq.into_iter().map(Form::tidy).collect(),
        ineq: ineq.into_iter().map(Form::tidy).collect(),
    }
}

/// Rows of `A z = b` or `G z ≤ h` as forms `row·z - rhs`.
pub fn assembled_rows(asm: &AssembledQp, mat: &CscMatrix, rhs: &[f64]) -> Vec<Row> {
    let mut rows = vec![Form::default(); rhs.len()];
    for (r, f) in rows.iter_mut().enumerate() {
        f.constant = -rhs[r];
    }
    for col in 0..mat.ncols {
        for k in mat.colptr[col]..mat.colptr[col + 1] {
            let tag = asm.tag(col);
            *rows[mat.rowval[k]].terms.entry(tag).or_insert(0.0) += mat.nzval[k];
        }
    }
    rows.into_iter().map(Form::tidy).collect()
}

/// Equality rows are defined up to sign; fix it by the first coefficient.
pub fn sign_normalized(rows: Vec<Row>) -> Vec<Row> {
    rows.into_iter()
        .map(|r| match r.terms.values().next() {
            Some(&v) if v < 0.0 => r.scaled(-1.0),
            _ => r,
        })
        .collect()
}

fn key(r: &Row) -> (Vec<VarTag>, Vec<i64>, i64) {
    let q = |v: f64| (v * 1e9).round() as i64;
    (
        r.terms.keys().copied().collect(),
        r.terms.values().map(|&v| q(v)).collect(),
        q(r.constant),
    )
}

/// Largest coefficient difference between two row sets after sorting both
/// into a canonical order; `None` when the variable patterns differ.
pub fn row_set_distance(mut a: Vec<Row>, mut b: Vec<Row>) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    a.sort_by_key(key);
    b.sort_by_key(key);
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        if !x.terms.keys().eq(y.terms.keys()) {
            return None;
        }
        for (u, v) in x.terms.values().zip(y.terms.values()) {
            worst = worst.max((u - v).abs());
        }
        worst = worst.max((x.constant - y.constant).abs());
    }
    Some(worst)
}
