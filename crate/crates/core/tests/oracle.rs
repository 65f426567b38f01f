use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdsls::blockops::StackedSignal;
use tdsls::error::Error;
use tdsls::model::OcpProblem;
use tdsls::oracle::{
    affine_residual, corner_count, enumerate_corners, filter_membership, membership_monte_carlo, realize_delta,
    response_identity_check, verify, VerifyLevel,
};
use tdsls::presets;
use tdsls::synthesis::{solve_ocp, FilterMode, SynthesisOptions, SynthesisResult};

fn opts(filter: FilterMode) -> SynthesisOptions {
    SynthesisOptions {
        filter,
        ..SynthesisOptions::default()
    }
}

fn truck(filter: FilterMode) -> (OcpProblem, SynthesisResult) {
    let p = presets::truck_trailer();
    let r = solve_ocp(&p, &opts(filter)).unwrap();
    (p, r)
}

#[test]
fn truck_membership_monte_carlo() {
    for filter in [FilterMode::Full, FilterMode::Anchored] {
        let (p, r) = truck(filter);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let worst = membership_monte_carlo(&p, &r, 1000, &mut rng).unwrap();
        assert!(worst <= 1.0 + 1e-6, "{filter:?}: {worst}");
    }
}

#[test]
fn truck_response_identity() {
    let (p, r) = truck(FilterMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let worst = response_identity_check(&p.system, p.x0(), &r, 100, &mut rng).unwrap();
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn first_column_is_the_plan() {
    let (p, r) = truck(FilterMode::Full);
    let mut wt = StackedSignal::zeros(p.horizon, 3);
    wt.block_mut(0).copy_from(p.x0());
    let x = r.phi_x.apply(&wt).unwrap();
    let plan = &r.nominal_x.data - &r.h.data;
    assert!((&x.data - plan).amax() <= 1e-12);
}

#[test]
fn nominal_realization_is_the_initial_state() {
    for filter in [FilterMode::Full, FilterMode::DiagOnly, FilterMode::Anchored] {
        let (p, r) = truck(filter);
        let weights = vec![vec![1.0, 0.0]; p.horizon];
        let w = vec![DVector::zeros(3); p.horizon];
        let delta = realize_delta(&p.system, &r.controller_k, &r.h, &p.x_hist, &p.u_hist, &weights, &w).unwrap();
        assert_eq!(delta.block(0).into_owned(), p.x0().clone());
        assert!(delta.data.rows(3, 3 * p.horizon).amax() <= 1e-9, "{filter:?}");
        if filter != FilterMode::Full {
            let (wt, _) = filter_membership(&r.sigma.to_blt(), &delta).unwrap();
            let x = &r.phi_x.apply(&wt).unwrap().data + &r.h.data;
            assert!((x - &r.nominal_x.data).amax() <= 1e-8, "{filter:?}");
        }
    }
}

#[test]
fn unactuated_system_has_zero_controller() {
    let mut p = presets::scalar_integrator(0.4, 0.05, 3);
    p.system.a_nom = vec![DMatrix::from_element(1, 1, 0.5)];
    p.system.b_nom = vec![DMatrix::zeros(1, 1)];
    let r = solve_ocp(&p, &SynthesisOptions::default()).unwrap();
    assert!(r.nominal_u.max_abs() <= 1e-6);
    assert!(r.phi_u.max_abs() <= 1e-6, "{}", r.phi_u.max_abs());
    assert!(r.controller_k.max_abs() <= 1e-5);
}

fn small_feasible(seed: u64, horizon: usize) -> (OcpProblem, SynthesisResult) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut p = presets::random_small(&mut rng);
        p.horizon = horizon;
        if let Ok(r) = solve_ocp(&p, &SynthesisOptions::default()) {
            return (p, r);
        }
    }
}

#[test]
fn small_instance_corners() {
    let (p, r) = small_feasible(5, 3);
    let report = enumerate_corners(&p, &r).unwrap();
    assert_eq!(Some(report.corners), corner_count(&p));
    assert!(report.max_norm <= 1.0 + 1e-6, "{}", report.max_norm);
}

#[test]
fn enumeration_refuses_huge_instances() {
    let (p, r) = truck(FilterMode::Full);
    assert!(matches!(enumerate_corners(&p, &r), Err(Error::InvalidArgument(_))));
}

#[test]
fn verify_fast_on_truck() {
    let (p, r) = truck(FilterMode::Full);
    let report = verify(&p, &r, VerifyLevel::Fast, 0).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.get("corner_enumeration").is_none());
}

#[test]
fn corrupted_response_fails_affine_check() {
    let (p, mut r) = truck(FilterMode::Full);
    let mut block = r.phi_x.block(2, 1).unwrap().clone();
    block[(0, 0)] += 1e-3;
    r.phi_x.set_block(2, 1, block).unwrap();
    assert!(affine_residual(&p.system, &r) > 1e-4);
    let report = verify(&p, &r, VerifyLevel::Fast, 0).unwrap();
    assert!(!report.passed());
    assert!(!report.get("affine_residual").unwrap().passed);
}

#[test]
fn verify_exhaustive_on_small_instance() {
    let (p, r) = small_feasible(8, 3);
    let report = verify(&p, &r, VerifyLevel::Exhaustive, 0).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.get("corner_enumeration").unwrap().value.is_some());
}
