//! Brute-force verifiers for a synthesized controller.
//!
//! Everything here works on dense matrices assembled directly from the
//! system data, so none of it shares code with the QP assembly it checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockops::{BltMatrix, StackedSignal};
use crate::error::{dim_err, Error, Result};
use crate::model::{OcpProblem, TimeDelaySystem, UncertaintyVertex};
use crate::synthesis::SynthesisResult;

pub const AFFINE_TOL: f64 = 1e-6;
pub const CONTROLLER_TOL: f64 = 1e-8;
pub const RESPONSE_TOL: f64 = 1e-6;
pub const MEMBERSHIP_TOL: f64 = 1e-6;
/// Largest corner count [`enumerate_corners`] will visit.
pub const MAX_CORNERS: u64 = 1 << 22;

/// Rolls the true dynamics under `u = K(x - h)` with per-step uncertainty
/// `weights[t]` and disturbance `w[t]`, returning `δ = [x_0, δ_0, …, δ_{T-1}]`
/// where `δ_t` is everything the nominal delayed update misses.
///
/// `x_hist` holds `x_{-na}..x_0` and `u_hist` holds `u_{-nb}..u_{-1}`.
pub fn realize_delta(
    sys: &TimeDelaySystem,
    k: &BltMatrix,
    h: &StackedSignal,
    x_hist: &[DVector<f64>],
    u_hist: &[DVector<f64>],
    weights: &[Vec<f64>],
    w: &[DVector<f64>],
) -> Result<StackedSignal> {
    let horizon = k.horizon();
    if weights.len() != horizon || w.len() != horizon {
        return Err(dim_err(format!(
            "{} uncertainty draws and {} disturbances for horizon {horizon}",
            weights.len(),
            w.len()
        )));
    }
    if x_hist.len() != sys.na + 1 || u_hist.len() != sys.nb {
        return Err(dim_err("history length does not match the delays"));
    }
    let mut xs = x_hist.to_vec();
    let mut us = u_hist.to_vec();
    let mut delta = StackedSignal::zeros(horizon, sys.nx);
    delta.block_mut(0).copy_from(&xs[sys.na]);
    for t in 0..horizon {
        let mut u = DVector::zeros(sys.nu);
        for c in 0..=t {
            if let Some(kb) = k.block(t, c) {
                u += kb * (&xs[sys.na + c] - h.block(c));
            }
        }
        us.push(u);
        let d = UncertaintyVertex::combine(&sys.vertices, &weights[t])?;
        let (x_now, u_now) = (xs.len() - 1, us.len() - 1);
        let mut nominal = DVector::zeros(sys.nx);
        let mut pert = w[t].clone();
        for i in 0..=sys.na {
            nominal += &sys.a_nom[i] * &xs[x_now - i];
            pert += &d.d_a[i] * &xs[x_now - i];
        }
        for j in 0..=sys.nb {
            nominal += &sys.b_nom[j] * &us[u_now - j];
            pert += &d.d_b[j] * &us[u_now - j];
        }
        delta.block_mut(t + 1).copy_from(&pert);
        xs.push(nominal + pert);
    }
    Ok(delta)
}

/// Solves `Σ w̃ = δ` block by block and returns `w̃` with
/// `max_{t ≥ 1} ‖w̃_t‖∞` (block 0 is `x_0` itself).
pub fn filter_membership(sigma: &BltMatrix, delta: &StackedSignal) -> Result<(StackedSignal, f64)> {
    let horizon = sigma.horizon();
    let n = sigma.block_rows();
    if delta.horizon != horizon || delta.block_dim != n {
        return Err(dim_err("filter and perturbation sizes differ"));
    }
    let mut wt = StackedSignal::zeros(horizon, n);
    let mut max_norm: f64 = 0.0;
    for r in 0..=horizon {
        let mut rhs = delta.block(r).clone_owned();
        for c in 0..r {
            if let Some(b) = sigma.block(r, c) {
                rhs -= b * wt.block(c);
            }
        }
        let diag = sigma.block_or_zero(r, r);
        let sol = diag
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidArgument(format!("filter block ({r}, {r}) is singular")))?;
        if r > 0 {
            max_norm = max_norm.max(sol.amax());
        }
        wt.block_mut(r).copy_from(&sol);
    }
    Ok((wt, max_norm))
}

/// Dense `Z·L` for a lag family `mats[0..]`: block `(t+1, s)` is
/// `mats[t - s]` for in-horizon `s ≤ t`.
fn shifted_lags(mats: &[DMatrix<f64>], horizon: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros((horizon + 1) * rows, (horizon + 1) * cols);
    for t in 0..horizon {
        for (lag, m) in mats.iter().enumerate().take(t + 1) {
            out.view_mut(((t + 1) * rows, (t - lag) * cols), (rows, cols))
                .copy_from(m);
        }
    }
    out
}

/// Pre-horizon contribution `Σ_{i>t} L_i x_{t-i}` for each step `t`, with
/// `hist` ending at index `-1`.
fn history_terms(mats: &[DMatrix<f64>], hist: &[DVector<f64>], horizon: usize, rows: usize) -> Vec<DVector<f64>> {
    (0..horizon)
        .map(|t| {
            let mut acc = DVector::zeros(rows);
            for (lag, m) in mats.iter().enumerate().skip(t + 1) {
                acc += m * &hist[hist.len() + t - lag];
            }
            acc
        })
        .collect()
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max)
}

/// Max-entry residual of `(I - ZÂ)Φ̃ₓ - ZB̂Φ̃ᵤ - Σ`.
pub fn affine_residual(sys: &TimeDelaySystem, result: &SynthesisResult) -> f64 {
    let horizon = result.phi_x.horizon();
    let za = shifted_lags(&sys.a_nom, horizon, sys.nx, sys.nx);
    let zb = shifted_lags(&sys.b_nom, horizon, sys.nx, sys.nu);
    let phi_x = result.phi_x.to_dense();
    let lhs = &phi_x - &za * &phi_x - &zb * result.phi_u.to_dense();
    (lhs - result.sigma.to_blt().to_dense()).amax()
}

/// `‖K Φ̃ₓ - Φ̃ᵤ‖∞` (induced row-sum norm).
pub fn controller_residual(result: &SynthesisResult) -> f64 {
    let k = result.controller_k.to_dense();
    inf_norm(&(k * result.phi_x.to_dense() - result.phi_u.to_dense()))
}

/// Simulates the surrogate dynamics `x̃⁺ = Âx̃ + B̂u + (Σw̃)` under `u = Kx̃`
/// for random `w̃` with `w̃_0 = x_0 - h_0` and `‖w̃_t‖∞ ≤ 1`, and returns the
/// largest deviation from `x̃ = Φ̃ₓw̃`, `u = Φ̃ᵤw̃`.
pub fn response_identity_check<R: Rng + ?Sized>(
    sys: &TimeDelaySystem,
    x0: &DVector<f64>,
    result: &SynthesisResult,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let horizon = result.phi_x.horizon();
    let sigma = result.sigma.to_blt();
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("finite bounds");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut wt = StackedSignal::zeros(horizon, sys.nx);
        wt.block_mut(0).copy_from(&(x0 - result.h.block(0)));
        for t in 1..=horizon {
            wt.block_mut(t)
                .copy_from(&DVector::from_fn(sys.nx, |_, _| unit.sample(rng)));
        }
        let drive = sigma.apply(&wt)?;
        let mut xs: Vec<DVector<f64>> = vec![drive.block(0).clone_owned()];
        let mut us: Vec<DVector<f64>> = Vec::new();
        for t in 0..=horizon {
            let mut u = DVector::zeros(sys.nu);
            for (c, x) in xs.iter().enumerate() {
                if let Some(kb) = result.controller_k.block(t, c) {
                    u += kb * x;
                }
            }
            us.push(u);
            if t == horizon {
                break;
            }
            let mut next = drive.block(t + 1).clone_owned();
            for (lag, a) in sys.a_nom.iter().enumerate().take(t + 1) {
                next += a * &xs[t - lag];
            }
            for (lag, b) in sys.b_nom.iter().enumerate().take(t + 1) {
                next += b * &us[t - lag];
            }
            xs.push(next);
        }
        let px = result.phi_x.apply(&wt)?;
        let pu = result.phi_u.apply(&wt)?;
        for t in 0..=horizon {
            worst = worst.max((&xs[t] - px.block(t)).amax());
            worst = worst.max((&us[t] - pu.block(t)).amax());
        }
    }
    Ok(worst)
}

/// Recomputes the over-approximation constraints from the solved maps and
/// returns the smallest slack `q_{t,i} - (|v| + Σ‖C‖₁ + σ_w)` over all
/// vertices, times and rows.
pub fn overapprox_slack(problem: &OcpProblem, result: &SynthesisResult) -> f64 {
    let sys = &problem.system;
    let (nx, horizon) = (sys.nx, problem.horizon);
    let x0 = problem.x0();
    let x_pre = &problem.x_hist[..sys.na];
    let phi_x = result.phi_x.to_dense();
    let phi_u = result.phi_u.to_dense();
    let sigma = result.sigma.to_blt().to_dense();
    let mut sigma_sub = sigma.clone();
    for t in 0..=horizon {
        sigma_sub.view_mut((t * nx, t * nx), (nx, nx)).fill(0.0);
    }
    let h = &result.h.data;
    let mut worst = f64::INFINITY;
    for vertex in &sys.vertices {
        let za = shifted_lags(&vertex.d_a, horizon, nx, nx);
        let zb = shifted_lags(&vertex.d_b, horizon, nx, sys.nu);
        let c = &za * &phi_x + &zb * &phi_u - &sigma_sub;
        let mut v = c.columns(0, nx) * x0 + &za * h;
        let xh = history_terms(&vertex.d_a, x_pre, horizon, nx);
        let uh = history_terms(&vertex.d_b, &problem.u_hist, horizon, nx);
        for t in 0..horizon {
            let mut rows = v.rows_mut((t + 1) * nx, nx);
            rows += &xh[t] + &uh[t];
        }
        for r in 1..=horizon {
            for i in 0..nx {
                let row = r * nx + i;
                let spread: f64 = c.row(row).columns(nx, (r - 1) * nx).abs().sum();
                let q = result.sigma.q[r - 1][i];
                worst = worst.min(q - (v[row].abs() + spread + sys.sigma_w));
            }
        }
    }
    worst
}

fn one_hot(m: usize, l: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[l] = 1.0;
    v
}

/// Largest filter-membership norm over `draws` random realizations with a
/// fresh vertex and a uniform disturbance at every step.
pub fn membership_monte_carlo<R: Rng + ?Sized>(
    problem: &OcpProblem,
    result: &SynthesisResult,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let sys = &problem.system;
    let sigma = result.sigma.to_blt();
    let horizon = problem.horizon;
    let m = sys.n_vertices();
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let weights: Vec<_> = (0..horizon).map(|_| one_hot(m, rng.random_range(0..m))).collect();
        let w: Vec<_> = (0..horizon)
            .map(|_| crate::simulate::sample_disturbance(sys.nx, sys.sigma_w, rng))
            .collect();
        let delta = realize_delta(
            sys,
            &result.controller_k,
            &result.h,
            &problem.x_hist,
            &problem.u_hist,
            &weights,
            &w,
        )?;
        worst = worst.max(filter_membership(&sigma, &delta)?.1);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerReport {
    pub corners: u64,
    pub max_norm: f64,
}

/// Number of (vertex sequence, disturbance sign pattern) corners.
pub fn corner_count(problem: &OcpProblem) -> Option<u64> {
    let sys = &problem.system;
    let horizon = u32::try_from(problem.horizon).ok()?;
    let signs = if sys.sigma_w > 0.0 {
        2u64.checked_pow(horizon.checked_mul(u32::try_from(sys.nx).ok()?)?)?
    } else {
        1
    };
    (sys.n_vertices() as u64).checked_pow(horizon)?.checked_mul(signs)
}

/// Visits every vertex-valued, time-varying uncertainty sequence combined
/// with every extreme disturbance sequence `w_t ∈ {±σ_w}ⁿˣ`.
pub fn enumerate_corners(problem: &OcpProblem, result: &SynthesisResult) -> Result<CornerReport> {
    let sys = &problem.system;
    let (nx, horizon, m) = (sys.nx, problem.horizon, sys.n_vertices());
    let corners = corner_count(problem)
        .filter(|&c| c <= MAX_CORNERS)
        .ok_or_else(|| Error::InvalidArgument(format!("corner enumeration exceeds {MAX_CORNERS} cases")))?;
    let patterns: u64 = if sys.sigma_w > 0.0 { 1 << (horizon * nx) } else { 1 };
    let sequences = (m as u64).pow(horizon as u32);
    let sigma = result.sigma.to_blt();
    let max_norm = (0..sequences)
        .into_par_iter()
        .map(|seq| -> Result<f64> {
            let mut code = seq;
            let weights: Vec<_> = (0..horizon)
                .map(|_| {
                    let l = (code % m as u64) as usize;
                    code /= m as u64;
                    one_hot(m, l)
                })
                .collect();
            let mut worst: f64 = 0.0;
            for pattern in 0..patterns {
                let w: Vec<_> = (0..horizon)
                    .map(|t| {
                        DVector::from_fn(nx, |i, _| {
                            let bit = (pattern >> (t * nx + i)) & 1;
                            if bit == 1 {
                                sys.sigma_w
                            } else {
                                -sys.sigma_w
                            }
                        })
                    })
                    .collect();
                let delta = realize_delta(
                    sys,
                    &result.controller_k,
                    &result.h,
                    &problem.x_hist,
                    &problem.u_hist,
                    &weights,
                    &w,
                )?;
                worst = worst.max(filter_membership(&sigma, &delta)?.1);
            }
            Ok(worst)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(CornerReport { corners, max_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    #[default]
    Fast,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub limit: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value: Some(value),
            limit,
            passed: value <= limit,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const RESPONSE_TRIALS: usize = 100;
pub const MEMBERSHIP_DRAWS: usize = 1000;

/// Runs the structural and soundness checks on a solved problem. The
/// exhaustive level adds corner enumeration when the corner count is at
/// most [`MAX_CORNERS`]; larger instances report it as skipped.
pub fn verify(problem: &OcpProblem, result: &SynthesisResult, level: VerifyLevel, seed: u64) -> Result<VerifyReport> {
    let sys = &problem.system;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        Check::at_most("affine_residual", affine_residual(sys, result), AFFINE_TOL),
        Check::at_most("controller_identity", controller_residual(result), CONTROLLER_TOL),
        Check::at_most(
            "response_identity",
            response_identity_check(sys, problem.x0(), result, RESPONSE_TRIALS, &mut rng)?,
            RESPONSE_TOL,
        ),
        Check::at_most("overapprox_slack", -overapprox_slack(problem, result), MEMBERSHIP_TOL),
        Check::at_most(
            "filter_membership",
            membership_monte_carlo(problem, result, MEMBERSHIP_DRAWS, &mut rng)?,
            1.0 + MEMBERSHIP_TOL,
        ),
    ];
    if level == VerifyLevel::Exhaustive {
        checks.push(match enumerate_corners(problem, result) {
            Ok(r) => Check {
                note: Some(format!("{} corners", r.corners)),
                ..Check::at_most("corner_enumeration", r.max_norm, 1.0 + MEMBERSHIP_TOL)
            },
            Err(Error::InvalidArgument(msg)) => Check {
                name: "corner_enumeration".into(),
                value: None,
                limit: 1.0 + MEMBERSHIP_TOL,
                passed: true,
                note: Some(format!("skipped: {msg}")),
            },
            Err(e) => return Err(e),
        });
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::scalar_integrator;
    use crate::synthesis::{solve_ocp, SynthesisOptions};

    fn scalar(a: f64, c: f64, d: f64) -> TimeDelaySystem {
        TimeDelaySystem {
            nx: 1,
            nu: 1,
            na: 1,
            nb: 0,
            a_nom: vec![DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, c)],
            b_nom: vec![DMatrix::from_element(1, 1, 1.0)],
            vertices: vec![UncertaintyVertex {
                d_a: vec![DMatrix::from_element(1, 1, d), DMatrix::zeros(1, 1)],
                d_b: vec![DMatrix::zeros(1, 1)],
            }],
            sigma_w: 0.0,
        }
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn zero_uncertainty_gives_disturbances() {
        let sys = scalar(0.5, 0.2, 0.0);
        let k = BltMatrix::zeros(2, 1, 1);
        let h = StackedSignal::zeros(2, 1);
        let delta = realize_delta(
            &sys,
            &k,
            &h,
            &[v(1.0), v(3.0)],
            &[],
            &vec![vec![1.0]; 2],
            &[v(0.1), v(-0.2)],
        )
        .unwrap();
        assert_eq!(delta.data.as_slice(), &[3.0, 0.1, -0.2]);
    }

    #[test]
    fn two_step_recursion_by_hand() {
        // x⁺ = (a + d)x + c x₋₁ + u, u = k(x - h) with k = -0.5 on the diagonal.
        let (a, c, d) = (0.5, 0.2, 0.1);
        let sys = scalar(a, c, d);
        let mut k = BltMatrix::zeros(2, 1, 1);
        k.set_block(0, 0, DMatrix::from_element(1, 1, -0.5)).unwrap();
        k.set_block(1, 1, DMatrix::from_element(1, 1, -0.5)).unwrap();
        let mut h = StackedSignal::zeros(2, 1);
        h.data[1] = c * 1.0;
        h.data[2] = a * c;
        let (xm1, x0) = (1.0, 2.0);
        let u0 = -0.5 * x0;
        let x1 = (a + d) * x0 + c * xm1 + u0;
        let u1 = -0.5 * (x1 - h.data[1]);
        let x2_nominal = a * x1 + c * x0 + u1;
        let x2 = x2_nominal + d * x1;
        let delta = realize_delta(
            &sys,
            &k,
            &h,
            &[v(xm1), v(x0)],
            &[],
            &vec![vec![1.0]; 2],
            &[v(0.0), v(0.0)],
        )
        .unwrap();
        assert!((delta.data[1] - d * x0).abs() < 1e-15);
        assert!((delta.data[2] - (x2 - x2_nominal)).abs() < 1e-15);
    }

    #[test]
    fn identity_filter_norm_is_signal_norm() {
        let sigma = BltMatrix::identity(2, 2);
        let delta = StackedSignal::from_blocks(&[
            DVector::from_vec(vec![9.0, 9.0]),
            DVector::from_vec(vec![0.5, -1.0]),
            DVector::from_vec(vec![0.25, 0.0]),
        ])
        .unwrap();
        let (_, norm) = filter_membership(&sigma, &delta).unwrap();
        assert_eq!(norm, 1.0);
    }

    #[test]
    fn scaled_filter_divides() {
        let mut sigma = BltMatrix::identity(2, 2);
        for t in 1..=2 {
            sigma.set_block(t, t, DMatrix::identity(2, 2) * 2.0).unwrap();
        }
        let delta = StackedSignal::from_blocks(&[
            DVector::zeros(2),
            DVector::from_vec(vec![2.0, -1.0]),
            DVector::from_vec(vec![-2.0, 1.5]),
        ])
        .unwrap();
        let (wt, norm) = filter_membership(&sigma, &delta).unwrap();
        assert_eq!(norm, 1.0);
        assert_eq!(wt.block(2)[1], 0.75);
    }

    #[test]
    fn solved_scalar_passes_every_check() {
        let problem = scalar_integrator(1.0, 0.1, 3);
        let result = solve_ocp(&problem, &SynthesisOptions::default()).unwrap();
        let report = verify(&problem, &result, VerifyLevel::Exhaustive, 1).unwrap();
        assert!(report.passed(), "{report:#?}");
        assert!(report.get("corner_enumeration").unwrap().value.is_some());
    }

    #[test]
    fn nominal_realization_reproduces_the_plan() {
        use crate::synthesis::FilterMode;
        let problem = scalar_integrator(1.0, 0.1, 3);
        for filter in [FilterMode::Anchored, FilterMode::DiagOnly] {
            let options = SynthesisOptions {
                filter,
                ..Default::default()
            };
            let result = solve_ocp(&problem, &options).unwrap();
            let sys = &problem.system;
            let weights = vec![vec![0.0; sys.n_vertices()]; 3];
            let w = vec![v(0.0); 3];
            let delta = realize_delta(
                sys,
                &result.controller_k,
                &result.h,
                &problem.x_hist,
                &problem.u_hist,
                &weights,
                &w,
            )
            .unwrap();
            assert_eq!(delta.data.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
            let (wt, _) = filter_membership(&result.sigma.to_blt(), &delta).unwrap();
            let x_hat = result.phi_x.apply(&wt).unwrap();
            for t in 0..=3 {
                let planned = result.nominal_x.block(t)[0];
                assert!(
                    (x_hat.block(t)[0] + result.h.block(t)[0] - planned).abs() < 1e-8,
                    "{filter:?} t={t}"
                );
            }
        }
    }
}
