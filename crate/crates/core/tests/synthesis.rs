mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdsls::blockops::build_delta_blocks;
use tdsls::error::Error;
use tdsls::model::{OcpProblem, PolytopeSet, TimeDelaySystem, UncertaintyVertex};
use tdsls::oracle::{affine_residual, controller_residual, overapprox_slack};
use tdsls::presets;
use tdsls::qp::{self, QpStatus};
use tdsls::synthesis::{
    assemble, assemble_c_and_v, layout_variables, solve_ocp, AuxTag, FilterMode, SynthesisOptions, VarTag,
};

fn opts(filter: FilterMode) -> SynthesisOptions {
    SynthesisOptions {
        filter,
        ..SynthesisOptions::default()
    }
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[test]
fn truck_example_is_feasible() {
    let p = presets::truck_trailer();
    let r = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
    assert!(r.objective.is_finite());
    assert!(r.nominal_u.block(0)[0].abs() <= std::f64::consts::PI + 1e-9);
    assert!(affine_residual(&p.system, &r) <= 1e-6);
    assert!(controller_residual(&r) <= 1e-8);
    assert!(overapprox_slack(&p, &r) >= -1e-6);
}

#[test]
fn first_block_is_identity() {
    let p = presets::truck_trailer();
    for filter in [FilterMode::Full, FilterMode::DiagOnly, FilterMode::Anchored] {
        let r = solve_ocp(&p, &opts(filter)).unwrap();
        let err = (r.phi_x.block(0, 0).unwrap() - DMatrix::<f64>::identity(3, 3)).amax();
        assert!(err <= 1e-9, "{filter:?}: {err}");
    }
}

#[test]
fn controller_is_causal() {
    let r = solve_ocp(&presets::truck_trailer(), &SynthesisOptions::default()).unwrap();
    let k = r.controller_k.to_dense();
    let (nu, nx) = (1, 3);
    for t in 0..=6 {
        for c in t + 1..=6 {
            assert_eq!(k.view((t * nu, c * nx), (nu, nx)).amax(), 0.0);
        }
    }
}

fn zero_dynamics() -> OcpProblem {
    let mut p = presets::scalar_integrator(0.5, 0.1, 3);
    p.system.a_nom = vec![scalar(0.0)];
    p.system.b_nom = vec![scalar(0.0)];
    p
}

#[test]
fn zero_dynamics_response_equals_filter() {
    let p = zero_dynamics();
    for filter in [FilterMode::Full, FilterMode::DiagOnly] {
        let r = solve_ocp(&p, &opts(filter)).unwrap();
        let gap = (r.phi_x.to_dense() - r.sigma.to_blt().to_dense()).amax();
        assert!(gap <= 1e-7, "{filter:?}: {gap}");
    }
}

#[test]
fn scalar_vertex_first_offset() {
    let (d0, d1, x0) = (0.3, -0.2, 1.7);
    let layout = layout_variables(1, 1, 2, FilterMode::DiagOnly);
    let vertex = UncertaintyVertex {
        d_a: vec![scalar(d0), scalar(d1)],
        d_b: vec![scalar(0.0)],
    };
    let delta = build_delta_blocks(&vertex, 1, 1, 2).unwrap();
    let h = tdsls::blockops::StackedSignal::zeros(2, 1);
    let x0v = DVector::from_element(1, x0);
    let maps = assemble_c_and_v(&layout, &delta, &h, &DVector::zeros(1), &DVector::zeros(0), &x0v).unwrap();
    let mut z = vec![0.0; layout.n_core];
    z[layout.phi_x(0, 0, 0, 0)] = 1.0;
    assert!((maps.v(0, 0).eval(&z) - d0 * x0).abs() < 1e-15);
    let x_minus = DVector::from_element(1, 0.9);
    let shifted = assemble_c_and_v(&layout, &delta, &h, &x_minus, &DVector::zeros(0), &x0v).unwrap();
    assert!((shifted.v(0, 0).eval(&z) - maps.v(0, 0).eval(&z) - d1 * 0.9).abs() < 1e-15);
}

#[test]
fn zero_vertex_maps_vanish() {
    let layout = layout_variables(2, 1, 3, FilterMode::DiagOnly);
    let delta = build_delta_blocks(&UncertaintyVertex::zeros(2, 1, 0, 0), 2, 1, 3).unwrap();
    let h = tdsls::blockops::StackedSignal::zeros(3, 2);
    let x0 = DVector::from_vec(vec![1.0, -2.0]);
    let maps = assemble_c_and_v(&layout, &delta, &h, &DVector::zeros(0), &DVector::zeros(0), &x0).unwrap();
    for t in 0..3 {
        for i in 0..2 {
            assert!(maps.v(t, i).terms.is_empty() && maps.v(t, i).constant == 0.0);
            for j in 1..=t {
                for m in 0..2 {
                    assert!(maps.c(t + 1, j, i, m).terms.is_empty());
                }
            }
        }
    }
}

#[test]
fn zero_vertex_filter_at_least_sigma() {
    let p = presets::scalar_integrator(0.3, 0.1, 3);
    let r = solve_ocp(&p, &opts(FilterMode::DiagOnly)).unwrap();
    for q in &r.sigma.q {
        assert!(q[0] >= 0.1 - 1e-7);
    }
}

fn two_vertex_scalar(horizon: usize) -> OcpProblem {
    let mut p = presets::scalar_integrator(0.3, 0.1, horizon);
    p.system.vertices = vec![
        UncertaintyVertex {
            d_a: vec![scalar(0.05)],
            d_b: vec![scalar(0.0)],
        },
        UncertaintyVertex {
            d_a: vec![scalar(-0.05)],
            d_b: vec![scalar(0.0)],
        },
    ];
    p
}

#[test]
fn bound_row_count() {
    let asm = assemble(&two_vertex_scalar(3), &opts(FilterMode::DiagOnly)).unwrap();
    let rows = common::assembled_rows(&asm, &asm.qp.g_ineq, &asm.qp.h_ineq);
    let bounds = rows
        .iter()
        .filter(|r| r.terms.keys().any(|k| matches!(k, VarTag::Q { .. })))
        .filter(|r| r.terms.keys().any(|k| matches!(k, VarTag::Aux(AuxTag::OverV { .. }))))
        .count();
    assert_eq!(bounds, 6);
}

#[test]
fn truck_state_rows_cover_every_facet() {
    let p = presets::truck_trailer();
    let asm = assemble(&p, &SynthesisOptions::default()).unwrap();
    let rows = common::assembled_rows(&asm, &asm.qp.g_ineq, &asm.qp.h_ineq);
    let initial = rows
        .iter()
        .filter(|r| r.terms.keys().all(|k| matches!(k, VarTag::PhiX { r: 0, c: 0, .. })))
        .count();
    assert_eq!(initial, 6);
    let mut seen = std::collections::BTreeSet::new();
    for tag in &asm.aux_tags {
        if let AuxTag::StateL1 { facet, t, .. } = tag {
            seen.insert((*facet, *t));
        }
    }
    let expected: std::collections::BTreeSet<_> = (0..6).flat_map(|f| (1..6).map(move |t| (f, t))).collect();
    assert_eq!(seen, expected);
}

#[test]
fn initial_state_row_is_the_state_constraint() {
    let inside = presets::scalar_integrator(0.95, 0.0, 2);
    assert!(solve_ocp(&inside, &SynthesisOptions::default()).is_ok());
    let outside = presets::scalar_integrator(1.05, 0.0, 2);
    assert!(matches!(
        solve_ocp(&outside, &SynthesisOptions::default()),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn zero_state_zero_cost() {
    let p = presets::scalar_integrator(0.0, 0.0, 4);
    let r = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
    assert!(r.objective.abs() <= 1e-7, "{}", r.objective);
    assert!(r.nominal_u.max_abs() <= 1e-6);
}

/// Exhaustive check over a fine input grid: some `u_0` keeps `x_0` and every
/// successor `x_0 + u_0 + w`, `|w| ≤ σ_w`, inside `|x| ≤ 1`.
fn grid_feasible(x0: f64, sigma_w: f64) -> bool {
    if x0.abs() > 1.0 {
        return false;
    }
    (0..=2000).any(|k| {
        let u = -1.0 + k as f64 * 1e-3;
        [-sigma_w, sigma_w].iter().all(|w| (x0 + u + w).abs() <= 1.0)
    })
}

#[test]
fn scalar_infeasible_instance() {
    assert!(!grid_feasible(2.0, 0.1));
    let p = presets::scalar_integrator(2.0, 0.1, 2);
    assert!(matches!(
        solve_ocp(&p, &SynthesisOptions::default()),
        Err(Error::Infeasible(_))
    ));
    assert!(grid_feasible(0.5, 0.1));
    assert!(solve_ocp(&presets::scalar_integrator(0.5, 0.1, 2), &SynthesisOptions::default()).is_ok());
}

#[test]
fn objective_monotone_in_sigma() {
    let mut last = f64::NEG_INFINITY;
    for sigma_w in [0.0, 0.05, 0.1, 0.2, 0.3] {
        let mut p = two_vertex_scalar(3);
        p.x_hist = vec![DVector::from_element(1, 0.8)];
        p.system.sigma_w = sigma_w;
        let r = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
        assert!(r.objective >= last - 1e-6, "{sigma_w}: {} < {last}", r.objective);
        last = r.objective;
    }
}

#[test]
fn qp_contract_on_assembled_problem() {
    let asm = assemble(&presets::truck_trailer(), &SynthesisOptions::default()).unwrap();
    let tol = 1e-7;
    let a = qp::solve(&asm.qp, tol, tol, 500).unwrap();
    assert_eq!(a.status, QpStatus::Optimal);
    let res = asm.qp.residuals(&a.z, &a.y_eq, &a.y_ineq);
    assert!(res.primal <= 2.0 * tol, "{res:?}");
    assert!(res.dual <= 2.0 * tol, "{res:?}");
    let b = qp::solve(&asm.qp, tol, tol, 500).unwrap();
    assert_eq!(a.z, b.z);
}

#[test]
fn admm_agrees_with_interior_point() {
    let p = two_vertex_scalar(3);
    let ipm = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
    let mut o = SynthesisOptions::default();
    o.qp.method = tdsls::qp::QpMethod::Admm;
    let admm = solve_ocp(&p, &o).unwrap();
    assert!((ipm.objective - admm.objective).abs() <= 1e-4 * (1.0 + ipm.objective.abs()));
}

#[test]
fn max_iter_reports_solver_failure() {
    let mut o = SynthesisOptions::default();
    o.qp.max_iter = 1;
    assert!(matches!(
        solve_ocp(&presets::truck_trailer(), &o),
        Err(Error::SolverFailure(_))
    ));
}

#[test]
fn invalid_problem_rejected_before_assembly() {
    let mut p = presets::truck_trailer();
    p.horizon = 3;
    assert!(matches!(
        solve_ocp(&p, &SynthesisOptions::default()),
        Err(Error::Invalid(_))
    ));
}

fn delayed_system(na: usize, nb: usize, seed: u64) -> OcpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    presets::random_scalability(na, nb, 9, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn variable_count_ignores_delays(na in 0usize..=8, nb in 0usize..=8, seed in any::<u64>()) {
        let base = assemble(&delayed_system(0, 0, seed), &SynthesisOptions::default()).unwrap();
        let asm = assemble(&delayed_system(na, nb, seed), &SynthesisOptions::default()).unwrap();
        prop_assert_eq!(asm.qp.n_vars(), base.qp.n_vars());
        prop_assert_eq!(asm.qp.n_eq() + asm.qp.n_ineq(), base.qp.n_eq() + base.qp.n_ineq());
    }
}

#[test]
fn rotated_state_polytope() {
    let mut p = presets::scalar_integrator(0.2, 0.05, 3);
    p.system = TimeDelaySystem {
        nx: 2,
        nu: 1,
        na: 0,
        nb: 0,
        a_nom: vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])],
        b_nom: vec![DMatrix::from_column_slice(2, 1, &[0.0, 0.1])],
        vertices: vec![UncertaintyVertex::zeros(2, 1, 0, 0)],
        sigma_w: 0.01,
    };
    p.x_set = PolytopeSet::new(
        DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]),
        DVector::from_element(4, 2.0),
    );
    p.q_weight = DMatrix::identity(2, 2);
    p.qt_weight = DMatrix::identity(2, 2);
    p.x_hist = vec![DVector::from_vec(vec![0.5, 0.2])];
    let r = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
    for t in 0..3 {
        assert!(p.x_set.min_slack(&r.nominal_x.block(t).into_owned()) >= -1e-7);
    }
}

fn undelayed_instance(seed: u64) -> OcpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = presets::random_small(&mut rng);
    let nx = p.system.nx;
    p.system.na = 0;
    p.system.nb = 0;
    p.system.a_nom.truncate(1);
    p.system.b_nom.truncate(1);
    for v in &mut p.system.vertices {
        v.d_a.truncate(1);
        v.d_b.truncate(1);
    }
    p.x_hist = vec![p.x0().clone()];
    p.u_hist.clear();
    p.terminal_set = Some(PolytopeSet::boxed(&vec![1.5; nx]));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn undelayed_rows_match_reference(seed in any::<u64>(), mode in 0usize..3) {
        let filter = [FilterMode::Full, FilterMode::DiagOnly, FilterMode::Anchored][mode];
        let p = undelayed_instance(seed);
        let o = opts(filter);
        let asm = assemble(&p, &o).unwrap();
        prop_assert_eq!(asm.h.max_abs(), 0.0);
        let reference = common::reference_rows(&p, filter, o.q_min);
        let eq = common::sign_normalized(common::assembled_rows(&asm, &asm.qp.a_eq, &asm.qp.b_eq));
        let ineq = common::assembled_rows(&asm, &asm.qp.g_ineq, &asm.qp.h_ineq);
        let d_eq = common::row_set_distance(eq, common::sign_normalized(reference.eq));
        let d_in = common::row_set_distance(ineq, reference.ineq);
        prop_assert!(d_eq.is_some_and(|d| d <= 1e-12), "{:?}", d_eq);
        prop_assert!(d_in.is_some_and(|d| d <= 1e-12), "{:?}", d_in);
    }
}
