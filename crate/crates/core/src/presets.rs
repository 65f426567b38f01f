//! Ready-made problems: the 3-state truck-trailer benchmark, the randomized
//! 2-state scalability family and a scalar integrator used throughout the
//! tests.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{OcpProblem, PolytopeSet, TimeDelaySystem, UncertaintyVertex};

pub const TRUCK_ALPHA_MIN: f64 = 1.0;
pub const TRUCK_ALPHA_MAX: f64 = 1.5915;

fn truck_a0(alpha: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0509,
            0.0,
            0.0, //
            -0.0509,
            1.0,
            0.0, //
            0.0509 * alpha,
            -0.4 * alpha,
            1.0,
        ],
    )
}

fn truck_a3(alpha: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[
            0.0218,
            0.0,
            0.0, //
            -0.0218,
            0.0,
            0.0, //
            0.0218 * alpha,
            0.0,
            0.0,
        ],
    )
}

/// Truck-trailer system with a 3-step state delay and `α ∈ [1, 1.5915]`.
///
/// The nominal model sits at `α = 1`; the two vertices are the interval
/// endpoints (a zero vertex and the `α = 1.5915` offset).
pub fn truck_trailer() -> OcpProblem {
    let nominal = TRUCK_ALPHA_MIN;
    let a_nom = vec![
        truck_a0(nominal),
        DMatrix::zeros(3, 3),
        DMatrix::zeros(3, 3),
        truck_a3(nominal),
    ];
    let b_nom = vec![DMatrix::from_column_slice(3, 1, &[-0.1429, 0.0, 0.0])];
    let vertex = |alpha: f64| UncertaintyVertex {
        d_a: vec![
            truck_a0(alpha) - truck_a0(nominal),
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 3),
            truck_a3(alpha) - truck_a3(nominal),
        ],
        d_b: vec![DMatrix::zeros(3, 1)],
    };
    let system = TimeDelaySystem {
        nx: 3,
        nu: 1,
        na: 3,
        nb: 0,
        a_nom,
        b_nom,
        vertices: vec![vertex(TRUCK_ALPHA_MIN), vertex(TRUCK_ALPHA_MAX)],
        sigma_w: 0.05,
    };
    let mut x_hist = vec![DVector::zeros(3); 3];
    x_hist.push(DVector::from_vec(vec![0.5 * PI, 0.75 * PI, -5.0]));
    OcpProblem {
        system,
        horizon: 6,
        x_set: PolytopeSet::boxed(&[2.0 / 3.0 * PI, 2.0 * PI, 15.0]),
        u_set: PolytopeSet::boxed(&[PI]),
        terminal_set: None,
        x_overrides: Vec::new(),
        q_weight: DMatrix::identity(3, 3),
        r_weight: DMatrix::from_element(1, 1, 0.01),
        qt_weight: DMatrix::identity(3, 3) * 100.0,
        x_hist,
        u_hist: Vec::new(),
    }
}

/// Random 2-state, 1-input delay system for the scalability sweep.
///
/// Nominal entries are i.i.d. `N(0, 0.3²)`; `ΔA_i` spans
/// `±diag(0.1, 0)` for every lag; no input uncertainty and no additive
/// disturbance.
pub fn random_scalability<R: Rng + ?Sized>(na: usize, nb: usize, horizon: usize, rng: &mut R) -> OcpProblem {
    let normal = Normal::new(0.0, 0.3).expect("valid normal");
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| normal.sample(rng));
    let a_nom: Vec<_> = (0..=na).map(|_| draw(2, 2)).collect();
    let b_nom: Vec<_> = (0..=nb).map(|_| draw(2, 1)).collect();
    let delta = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.0]);
    let vertex = |sign: f64| UncertaintyVertex {
        d_a: vec![&delta * sign; na + 1],
        d_b: vec![DMatrix::zeros(2, 1); nb + 1],
    };
    let mut x_hist = vec![DVector::zeros(2); na];
    x_hist.push(DVector::from_vec(vec![2.5, -2.5]));
    OcpProblem {
        system: TimeDelaySystem {
            nx: 2,
            nu: 1,
            na,
            nb,
            a_nom,
            b_nom,
            vertices: vec![vertex(1.0), vertex(-1.0)],
            sigma_w: 0.0,
        },
        horizon,
        x_set: PolytopeSet::boxed(&[30.0, 30.0]),
        u_set: PolytopeSet::boxed(&[5.0]),
        terminal_set: Some(PolytopeSet::boxed(&[30.0, 30.0])),
        x_overrides: Vec::new(),
        q_weight: DMatrix::identity(2, 2),
        r_weight: DMatrix::identity(1, 1),
        qt_weight: DMatrix::identity(2, 2),
        x_hist,
        u_hist: vec![DVector::zeros(1); nb],
    }
}

/// Scalar integrator `x⁺ = x + u + w` with `|x| ≤ 1`, `|u| ≤ 1`.
pub fn scalar_integrator(x0: f64, sigma_w: f64, horizon: usize) -> OcpProblem {
    let one = DMatrix::from_element(1, 1, 1.0);
    OcpProblem {
        system: TimeDelaySystem {
            nx: 1,
            nu: 1,
            na: 0,
            nb: 0,
            a_nom: vec![one.clone()],
            b_nom: vec![one.clone()],
            vertices: vec![UncertaintyVertex::zeros(1, 1, 0, 0)],
            sigma_w,
        },
        horizon,
        x_set: PolytopeSet::boxed(&[1.0]),
        u_set: PolytopeSet::boxed(&[1.0]),
        terminal_set: None,
        x_overrides: Vec::new(),
        q_weight: one.clone(),
        r_weight: one.clone(),
        qt_weight: one,
        x_hist: vec![DVector::from_element(1, x0)],
        u_hist: Vec::new(),
    }
}

/// Small random delay system sized for exhaustive corner enumeration:
/// `nx ∈ {1, 2}`, one input, delays up to one step, `T ∈ {2, 3, 4}`, two
/// vertices `±(ΔA_0, ΔB_0)`, `σ_w = 0.05` and a random nonzero history.
pub fn random_small<R: Rng + ?Sized>(rng: &mut R) -> OcpProblem {
    let nx = rng.random_range(1..=2);
    let na = rng.random_range(0..=1);
    let nb = rng.random_range(0..=1);
    let horizon = rng.random_range(2..=4);
    let normal = Normal::new(0.0, 0.3).expect("valid normal");
    let mut a_nom: Vec<DMatrix<f64>> = (0..=na)
        .map(|_| DMatrix::from_fn(nx, nx, |_, _| normal.sample(rng)))
        .collect();
    a_nom[0] += DMatrix::identity(nx, nx) * 0.8;
    let b_nom = (0..=nb)
        .map(|_| DMatrix::from_fn(nx, 1, |_, _| normal.sample(rng)))
        .collect();
    let d_a0 = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.05..=0.05));
    let d_b0 = DMatrix::from_fn(nx, 1, |_, _| rng.random_range(-0.02..=0.02));
    let vertex = |sign: f64| {
        let mut v = UncertaintyVertex::zeros(nx, 1, na, nb);
        v.d_a[0] = &d_a0 * sign;
        v.d_b[0] = &d_b0 * sign;
        v
    };
    let mut point = |r: f64| DVector::from_fn(nx, |_, _| rng.random_range(-r..=r));
    let mut x_hist: Vec<_> = (0..na).map(|_| point(0.5)).collect();
    x_hist.push(point(1.0));
    let u_hist = (0..nb)
        .map(|_| DVector::from_element(1, rng.random_range(-0.5..=0.5)))
        .collect();
    OcpProblem {
        system: TimeDelaySystem {
            nx,
            nu: 1,
            na,
            nb,
            a_nom,
            b_nom,
            vertices: vec![vertex(1.0), vertex(-1.0)],
            sigma_w: 0.05,
        },
        horizon,
        x_set: PolytopeSet::boxed(&vec![1.2; nx]),
        u_set: PolytopeSet::boxed(&[2.0]),
        terminal_set: None,
        x_overrides: Vec::new(),
        q_weight: DMatrix::identity(nx, nx),
        r_weight: DMatrix::identity(1, 1),
        qt_weight: DMatrix::identity(nx, nx),
        x_hist,
        u_hist,
    }
}
