//! Problem data: the uncertain time-delay system, constraint polytopes and
//! the finite-horizon robust optimal control problem.
//!
//! The system is
//!
//! ```text
//! x(k+1) = sum_{i=0..na} (Â_i + ΔA_i) x(k-i) + sum_{j=0..nb} (B̂_j + ΔB_j) u(k-j) + w(k)
//! ```
//!
//! where `(ΔA, ΔB)` ranges over the convex hull of the listed vertices and
//! `‖w‖∞ ≤ σ_w`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One vertex of the polytopic uncertainty set.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVertex {
    /// ΔA_0..ΔA_na, each nx×nx.
    pub d_a: Vec<DMatrix<f64>>,
    /// ΔB_0..ΔB_nb, each nx×nu.
    pub d_b: Vec<DMatrix<f64>>,
}

impl UncertaintyVertex {
    pub fn zeros(nx: usize, nu: usize, na: usize, nb: usize) -> Self {
        Self {
            d_a: vec![DMatrix::zeros(nx, nx); na + 1],
            d_b: vec![DMatrix::zeros(nx, nu); nb + 1],
        }
    }

    /// Convex combination `sum_l weights[l] * vertices[l]`.
    pub fn combine(vertices: &[UncertaintyVertex], weights: &[f64]) -> Result<Self> {
        let first = vertices
            .first()
            .ok_or_else(|| Error::InvalidArgument("no uncertainty vertices".into()))?;
        if weights.len() != vertices.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} vertices",
                weights.len(),
                vertices.len()
            )));
        }
        let mut out = Self {
            d_a: first.d_a.iter().map(|m| m * 0.0).collect(),
            d_b: first.d_b.iter().map(|m| m * 0.0).collect(),
        };
        for (v, &w) in vertices.iter().zip(weights) {
            for (acc, m) in out.d_a.iter_mut().zip(&v.d_a) {
                *acc += m * w;
            }
            for (acc, m) in out.d_b.iter_mut().zip(&v.d_b) {
                *acc += m * w;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDelaySystem {
    pub nx: usize,
    pub nu: usize,
    pub na: usize,
    pub nb: usize,
    /// Â_0..Â_na.
    pub a_nom: Vec<DMatrix<f64>>,
    /// B̂_0..B̂_nb.
    pub b_nom: Vec<DMatrix<f64>>,
    pub vertices: Vec<UncertaintyVertex>,
    /// ∞-norm bound on the additive disturbance.
    pub sigma_w: f64,
}

impl TimeDelaySystem {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }
}

/// `{ x | F x ≤ b }`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeSet {
    pub f_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
}

impl PolytopeSet {
    pub fn new(f_mat: DMatrix<f64>, b_vec: DVector<f64>) -> Self {
        Self { f_mat, b_vec }
    }

    /// Axis-aligned box `|x_i| ≤ radii[i]`, facets ordered `+e_0, -e_0, +e_1, ...`.
    pub fn boxed(radii: &[f64]) -> Self {
        let n = radii.len();
        let mut f_mat = DMatrix::zeros(2 * n, n);
        let mut b_vec = DVector::zeros(2 * n);
        for (i, &r) in radii.iter().enumerate() {
            f_mat[(2 * i, i)] = 1.0;
            f_mat[(2 * i + 1, i)] = -1.0;
            b_vec[2 * i] = r;
            b_vec[2 * i + 1] = r;
        }
        Self { f_mat, b_vec }
    }

    pub fn dim(&self) -> usize {
        self.f_mat.ncols()
    }

    pub fn n_facets(&self) -> usize {
        self.b_vec.len()
    }

    /// `(f, b)` pairs in row order.
    pub fn facets(&self) -> impl Iterator<Item = (DVector<f64>, f64)> + '_ {
        (0..self.n_facets()).map(move |r| (self.f_mat.row(r).transpose(), self.b_vec[r]))
    }

    /// Per-facet slack `b - F x`; negative entries are violations.
    pub fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b_vec - &self.f_mat * x
    }

    pub fn min_slack(&self, x: &DVector<f64>) -> f64 {
        self.slacks(x).min()
    }
}

/// Replaces the state constraint at a single time step (the terminal set when
/// `t` equals the horizon).
#[derive(Debug, Clone, PartialEq)]
pub struct StateOverride {
    pub t: usize,
    pub set: PolytopeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub system: TimeDelaySystem,
    pub horizon: usize,
    pub x_set: PolytopeSet,
    pub u_set: PolytopeSet,
    pub terminal_set: Option<PolytopeSet>,
    pub x_overrides: Vec<StateOverride>,
    pub q_weight: DMatrix<f64>,
    pub r_weight: DMatrix<f64>,
    pub qt_weight: DMatrix<f64>,
    /// x_{-na}..x_0.
    pub x_hist: Vec<DVector<f64>>,
    /// u_{-nb}..u_{-1}.
    pub u_hist: Vec<DVector<f64>>,
}

impl OcpProblem {
    pub fn x0(&self) -> &DVector<f64> {
        self.x_hist.last().expect("x_hist holds at least x_0")
    }

    /// State polytope imposed at time `t` (`t == horizon` is the terminal
    /// constraint, which may be absent).
    pub fn state_set_at(&self, t: usize) -> Option<&PolytopeSet> {
        if let Some(o) = self.x_overrides.iter().rev().find(|o| o.t == t) {
            return Some(&o.set);
        }
        if t < self.horizon {
            Some(&self.x_set)
        } else {
            self.terminal_set.as_ref()
        }
    }

    /// Copy of the problem with a new initial history.
    pub fn with_history(&self, x_hist: Vec<DVector<f64>>, u_hist: Vec<DVector<f64>>) -> Self {
        Self {
            x_hist,
            u_hist,
            ..self.clone()
        }
    }
}

pub fn facets(set: &PolytopeSet) -> Vec<(DVector<f64>, f64)> {
    set.facets().collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationCode {
    ZeroDimension,
    DimensionMismatch,
    DelayLength,
    NoVertices,
    VertexShape,
    NegativeSigma,
    NonFinite,
    HorizonTooShort,
    PolytopeShape,
    OriginNotInterior,
    WeightNotSymmetric,
    WeightNotPsd,
    HistoryLength,
    OverrideTime,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ZeroDimension => "zero_dimension",
            Self::DimensionMismatch => "dimension_mismatch",
            Self::DelayLength => "delay_length",
            Self::NoVertices => "no_vertices",
            Self::VertexShape => "vertex_shape",
            Self::NegativeSigma => "negative_sigma_w",
            Self::NonFinite => "non_finite",
            Self::HorizonTooShort => "horizon_too_short",
            Self::PolytopeShape => "polytope_shape",
            Self::OriginNotInterior => "origin_not_interior",
            Self::WeightNotSymmetric => "weight_not_symmetric",
            Self::WeightNotPsd => "weight_not_psd",
            Self::HistoryLength => "history_length",
            Self::OverrideTime => "override_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Default)]
struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, code: ViolationCode, message: impl Into<String>) {
        self.out.push(Violation {
            code,
            message: message.into(),
        });
    }

    fn shape(&mut self, name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) {
        if m.nrows() != rows || m.ncols() != cols {
            self.push(
                ViolationCode::DimensionMismatch,
                format!("{name} is {}x{}, expected {rows}x{cols}", m.nrows(), m.ncols()),
            );
        }
        if m.iter().any(|v| !v.is_finite()) {
            self.push(ViolationCode::NonFinite, format!("{name} has non-finite entries"));
        }
    }

    fn vector(&mut self, name: &str, v: &DVector<f64>, len: usize) {
        if v.len() != len {
            self.push(
                ViolationCode::DimensionMismatch,
                format!("{name} has length {}, expected {len}", v.len()),
            );
        }
        if v.iter().any(|x| !x.is_finite()) {
            self.push(ViolationCode::NonFinite, format!("{name} has non-finite entries"));
        }
    }

    fn polytope(&mut self, name: &str, set: &PolytopeSet, dim: usize) {
        if set.f_mat.nrows() != set.b_vec.len() {
            self.push(
                ViolationCode::PolytopeShape,
                format!(
                    "{name}: F has {} rows but b has {} entries",
                    set.f_mat.nrows(),
                    set.b_vec.len()
                ),
            );
        }
        if set.b_vec.is_empty() {
            self.push(ViolationCode::PolytopeShape, format!("{name} has no facets"));
        }
        if set.f_mat.ncols() != dim {
            self.push(
                ViolationCode::DimensionMismatch,
                format!("{name}: F has {} columns, expected {dim}", set.f_mat.ncols()),
            );
        }
        if set.f_mat.iter().chain(set.b_vec.iter()).any(|v| !v.is_finite()) {
            self.push(ViolationCode::NonFinite, format!("{name} has non-finite entries"));
        }
        if set.b_vec.iter().any(|&b| !(b > 0.0)) {
            self.push(
                ViolationCode::OriginNotInterior,
                format!("{name}: offsets must be strictly positive so the origin is interior"),
            );
        }
    }

    fn weight(&mut self, name: &str, m: &DMatrix<f64>, n: usize) {
        let before = self.out.len();
        self.shape(name, m, n, n);
        if self.out.len() != before || !m.is_square() {
            return;
        }
        let scale = m.amax().max(1.0);
        if (m - m.transpose()).amax() > 1e-9 * scale {
            self.push(ViolationCode::WeightNotSymmetric, format!("{name} is not symmetric"));
            return;
        }
        if n > 0 {
            let sym = (m + m.transpose()) * 0.5;
            let min_eig = sym.symmetric_eigenvalues().min();
            if min_eig < -1e-9 * scale {
                self.push(
                    ViolationCode::WeightNotPsd,
                    format!("{name} is not positive semidefinite (min eigenvalue {min_eig:e})"),
                );
            }
        }
    }
}

/// Every violated invariant of `problem`. An empty list means valid.
pub fn validate(problem: &OcpProblem) -> Vec<Violation> {
    let mut c = Checker::default();
    let sys = &problem.system;
    let (nx, nu, na, nb) = (sys.nx, sys.nu, sys.na, sys.nb);

    if nx == 0 {
        c.push(ViolationCode::ZeroDimension, "nx must be positive");
    }
    if nu == 0 {
        c.push(ViolationCode::ZeroDimension, "nu must be positive");
    }
    if sys.a_nom.len() != na + 1 {
        c.push(
            ViolationCode::DelayLength,
            format!("A_nom has {} matrices, expected na+1 = {}", sys.a_nom.len(), na + 1),
        );
    }
    if sys.b_nom.len() != nb + 1 {
        c.push(
            ViolationCode::DelayLength,
            format!("B_nom has {} matrices, expected nb+1 = {}", sys.b_nom.len(), nb + 1),
        );
    }
    for (i, m) in sys.a_nom.iter().enumerate() {
        c.shape(&format!("A_nom[{i}]"), m, nx, nx);
    }
    for (j, m) in sys.b_nom.iter().enumerate() {
        c.shape(&format!("B_nom[{j}]"), m, nx, nu);
    }
    if sys.vertices.is_empty() {
        c.push(ViolationCode::NoVertices, "at least one uncertainty vertex is required");
    }
    for (l, v) in sys.vertices.iter().enumerate() {
        if v.d_a.len() != na + 1 || v.d_b.len() != nb + 1 {
            c.push(
                ViolationCode::VertexShape,
                format!(
                    "vertex {l} has {} dA and {} dB matrices, expected {} and {}",
                    v.d_a.len(),
                    v.d_b.len(),
                    na + 1,
                    nb + 1
                ),
            );
        }
        for (i, m) in v.d_a.iter().enumerate() {
            c.shape(&format!("vertices[{l}].dA[{i}]"), m, nx, nx);
        }
        for (j, m) in v.d_b.iter().enumerate() {
            c.shape(&format!("vertices[{l}].dB[{j}]"), m, nx, nu);
        }
    }
    if !sys.sigma_w.is_finite() {
        c.push(ViolationCode::NonFinite, "sigma_w is not finite");
    } else if sys.sigma_w < 0.0 {
        c.push(ViolationCode::NegativeSigma, "sigma_w must be nonnegative");
    }

    if problem.horizon <= na.max(nb) {
        c.push(
            ViolationCode::HorizonTooShort,
            format!(
                "horizon T = {} must exceed max(na, nb) = {}",
                problem.horizon,
                na.max(nb)
            ),
        );
    }

    c.polytope("X", &problem.x_set, nx);
    c.polytope("U", &problem.u_set, nu);
    if let Some(xt) = &problem.terminal_set {
        c.polytope("XT", xt, nx);
    }
    for o in &problem.x_overrides {
        if o.t > problem.horizon {
            c.push(
                ViolationCode::OverrideTime,
                format!(
                    "state override at t = {} lies beyond the horizon {}",
                    o.t, problem.horizon
                ),
            );
        }
        c.polytope(&format!("X_t[{}]", o.t), &o.set, nx);
    }

    c.weight("Q", &problem.q_weight, nx);
    c.weight("R", &problem.r_weight, nu);
    c.weight("QT", &problem.qt_weight, nx);

    if problem.x_hist.len() != na + 1 {
        c.push(
            ViolationCode::HistoryLength,
            format!("x_hist has {} states, expected na+1 = {}", problem.x_hist.len(), na + 1),
        );
    }
    for (i, x) in problem.x_hist.iter().enumerate() {
        c.vector(&format!("x_hist[{i}]"), x, nx);
    }
    if problem.u_hist.len() != nb {
        c.push(
            ViolationCode::HistoryLength,
            format!("u_hist has {} inputs, expected nb = {nb}", problem.u_hist.len()),
        );
    }
    for (j, u) in problem.u_hist.iter().enumerate() {
        c.vector(&format!("u_hist[{j}]"), u, nu);
    }
    c.out
}

// ---------------------------------------------------------------------------
// Problem file (JSON)

type RowMajor = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolytopeFile {
    #[serde(rename = "F")]
    f: RowMajor,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VertexFile {
    #[serde(rename = "dA")]
    d_a: Vec<RowMajor>,
    #[serde(rename = "dB")]
    d_b: Vec<RowMajor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideFile {
    t: usize,
    #[serde(rename = "F")]
    f: RowMajor,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    nx: usize,
    nu: usize,
    na: usize,
    nb: usize,
    #[serde(rename = "A_nom")]
    a_nom: Vec<RowMajor>,
    #[serde(rename = "B_nom")]
    b_nom: Vec<RowMajor>,
    vertices: Vec<VertexFile>,
    sigma_w: f64,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "X")]
    x_set: PolytopeFile,
    #[serde(rename = "U")]
    u_set: PolytopeFile,
    #[serde(rename = "XT", default, skip_serializing_if = "Option::is_none")]
    terminal_set: Option<PolytopeFile>,
    #[serde(rename = "X_t", default, skip_serializing_if = "Vec::is_empty")]
    x_overrides: Vec<OverrideFile>,
    #[serde(rename = "Q")]
    q: RowMajor,
    #[serde(rename = "R")]
    r: RowMajor,
    #[serde(rename = "QT")]
    qt: RowMajor,
    x_hist: Vec<Vec<f64>>,
    #[serde(default)]
    u_hist: Vec<Vec<f64>>,
}

fn matrix_from_rows(rows: &RowMajor, field: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != ncols) {
        return Err(Error::Parse {
            path: format!("{field}[{r}]"),
            line: 0,
            column: 0,
            message: format!("ragged matrix: row has {} entries, expected {ncols}", row.len()),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> RowMajor {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrices_from(list: &[RowMajor], field: &str) -> Result<Vec<DMatrix<f64>>> {
    list.iter()
        .enumerate()
        .map(|(i, m)| matrix_from_rows(m, &format!("{field}[{i}]")))
        .collect()
}

fn polytope_from(p: &PolytopeFile, field: &str) -> Result<PolytopeSet> {
    Ok(PolytopeSet {
        f_mat: matrix_from_rows(&p.f, &format!("{field}.F"))?,
        b_vec: DVector::from_vec(p.b.clone()),
    })
}

fn polytope_to(p: &PolytopeSet) -> PolytopeFile {
    PolytopeFile {
        f: matrix_to_rows(&p.f_mat),
        b: p.b_vec.iter().copied().collect(),
    }
}

impl ProblemFile {
    fn into_problem(self) -> Result<OcpProblem> {
        let vertices = self
            .vertices
            .iter()
            .enumerate()
            .map(|(l, v)| {
                Ok(UncertaintyVertex {
                    d_a: matrices_from(&v.d_a, &format!("vertices[{l}].dA"))?,
                    d_b: matrices_from(&v.d_b, &format!("vertices[{l}].dB"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let x_overrides = self
            .x_overrides
            .iter()
            .enumerate()
            .map(|(k, o)| {
                Ok(StateOverride {
                    t: o.t,
                    set: PolytopeSet {
                        f_mat: matrix_from_rows(&o.f, &format!("X_t[{k}].F"))?,
                        b_vec: DVector::from_vec(o.b.clone()),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OcpProblem {
            system: TimeDelaySystem {
                nx: self.nx,
                nu: self.nu,
                na: self.na,
                nb: self.nb,
                a_nom: matrices_from(&self.a_nom, "A_nom")?,
                b_nom: matrices_from(&self.b_nom, "B_nom")?,
                vertices,
                sigma_w: self.sigma_w,
            },
            horizon: self.horizon,
            x_set: polytope_from(&self.x_set, "X")?,
            u_set: polytope_from(&self.u_set, "U")?,
            terminal_set: self.terminal_set.as_ref().map(|p| polytope_from(p, "XT")).transpose()?,
            x_overrides,
            q_weight: matrix_from_rows(&self.q, "Q")?,
            r_weight: matrix_from_rows(&self.r, "R")?,
            qt_weight: matrix_from_rows(&self.qt, "QT")?,
            x_hist: self.x_hist.into_iter().map(DVector::from_vec).collect(),
            u_hist: self.u_hist.into_iter().map(DVector::from_vec).collect(),
        })
    }

    fn from_problem(p: &OcpProblem) -> Self {
        let sys = &p.system;
        Self {
            description: None,
            nx: sys.nx,
            nu: sys.nu,
            na: sys.na,
            nb: sys.nb,
            a_nom: sys.a_nom.iter().map(matrix_to_rows).collect(),
            b_nom: sys.b_nom.iter().map(matrix_to_rows).collect(),
            vertices: sys
                .vertices
                .iter()
                .map(|v| VertexFile {
                    d_a: v.d_a.iter().map(matrix_to_rows).collect(),
                    d_b: v.d_b.iter().map(matrix_to_rows).collect(),
                })
                .collect(),
            sigma_w: sys.sigma_w,
            horizon: p.horizon,
            x_set: polytope_to(&p.x_set),
            u_set: polytope_to(&p.u_set),
            terminal_set: p.terminal_set.as_ref().map(polytope_to),
            x_overrides: p
                .x_overrides
                .iter()
                .map(|o| OverrideFile {
                    t: o.t,
                    f: matrix_to_rows(&o.set.f_mat),
                    b: o.set.b_vec.iter().copied().collect(),
                })
                .collect(),
            q: matrix_to_rows(&p.q_weight),
            r: matrix_to_rows(&p.r_weight),
            qt: matrix_to_rows(&p.qt_weight),
            x_hist: p.x_hist.iter().map(|x| x.iter().copied().collect()).collect(),
            u_hist: p.u_hist.iter().map(|u| u.iter().copied().collect()).collect(),
        }
    }
}

/// Parses a problem file without checking invariants.
pub fn parse_problem(text: &str) -> Result<OcpProblem> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ProblemFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    file.into_problem()
}

/// Parses and validates a problem file; all violations are reported together.
pub fn load_problem(text: &str) -> Result<OcpProblem> {
    let problem = parse_problem(text)?;
    let violations = validate(&problem);
    if violations.is_empty() {
        Ok(problem)
    } else {
        Err(Error::Invalid(violations))
    }
}

pub fn load_problem_file(path: impl AsRef<std::path::Path>) -> Result<OcpProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.display().to_string(),
        source,
    })?;
    load_problem(&text)
}

/// Serializes to the problem-file schema (pretty-printed JSON).
pub fn to_json(problem: &OcpProblem) -> String {
    serde_json::to_string_pretty(&ProblemFile::from_problem(problem)).expect("problem file serialization cannot fail")
}
