use std::sync::Arc;

use tic_core::benchmarks::DeterministicExample;
use tic_core::bsde::{static_value, ControlSet, SearchOptions};
use tic_core::dynutil::*;
use tic_core::lattice::{ScenarioTree, TimeGrid, TreeMode, TreeRandomVariable};

fn path_tree(horizon: f64, steps: usize) -> ScenarioTree {
    ScenarioTree::new(TimeGrid::new(horizon, steps).unwrap(), 1, TreeMode::Path).unwrap()
}

fn deterministic_coeffs() -> LinearCoeffs {
    LinearCoeffs::constant([[0.0, -1.0], [0.0, 0.0]], [[0.0; 2]; 2], [1.0, 1.0], [1.0, 0.0])
}

fn stochastic_coeffs() -> LinearCoeffs {
    LinearCoeffs::constant([[0.2, -0.5], [0.3, -0.1]], [[0.4, 0.3], [-0.2, 0.1]], [1.0, -0.5], [0.5, 1.0])
}

#[test]
fn deterministic_phi_starts_at_phi_and_recovers_the_value() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.problem();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 8).unwrap(), 1, TreeMode::Recombining).unwrap();
    assert_eq!(deterministic_phi(&p, &tree, 0, &[0.3, -0.2], 1_000_000).unwrap(), 0.3);
    let at_end = deterministic_phi(&p, &tree, 8, &[0.0, 0.0], 1_000_000).unwrap();
    assert!((at_end - ex.tree_value(8, 0)).abs() < 1e-12);
    assert!((at_end - 0.5).abs() <= tree.dt());
}

#[test]
fn deterministic_phi_satisfies_forward_dpp() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.problem();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 6).unwrap(), 1, TreeMode::Recombining).unwrap();
    let engine = tic_core::bsde::Engine::new(&p, &tree).unwrap();
    for y in [[0.0, 0.0], [0.4, 1.0], [-0.3, 0.5]] {
        let direct = deterministic_phi(&p, &tree, 6, &y, 1_000_000).unwrap();
        let seg = tic_core::bsde::Segment::cone(&tree, 3, 0, 6).unwrap();
        let eta = TreeRandomVariable::constant(&tree, 6, &y);
        let term = seg.gather_terminal(&eta).unwrap();
        let objective = |v: &[f64]| deterministic_phi(&p, &tree, 3, v, 1_000_000).unwrap();
        let split = engine.optimize(&seg, &term, &objective, &SearchOptions::default()).unwrap().value;
        assert!((direct - split).abs() < 1e-12, "{direct} vs {split}");
    }
}

#[test]
fn frozen_dynamics_keep_phi() {
    let c = LinearCoeffs::constant([[0.0; 2]; 2], [[0.0; 2]; 2], [0.0, 0.0], [1.0, 0.5]);
    let p = c.problem(ControlSet::scalar(&[0.0, 1.0]).unwrap(), [0.0, 0.0], 0.0).with_class(tic_core::bsde::ControlClass::Deterministic);
    let tree = ScenarioTree::new(TimeGrid::new(1.0, 4).unwrap(), 1, TreeMode::Recombining).unwrap();
    for k in 0..=4 {
        assert_eq!(deterministic_phi(&p, &tree, k, &[0.2, 0.4], 1000).unwrap(), 0.4);
    }
}

#[test]
fn maximizer_breaks_ties_lexicographically() {
    let phi = StaticUtility(Arc::new(|y: &[f64]| y[0] + y[1]));
    let pick = select_maximizer(&phi, &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.2, 0.3]], 0, 0).unwrap();
    assert_eq!(pick, vec![1.0, 0.0]);
    assert_eq!(select_maximizer(&phi, &[vec![3.0, 3.0]], 0, 0).unwrap(), vec![3.0, 3.0]);
    assert!(select_maximizer(&phi, &[], 0, 0).is_err());
}

#[test]
fn maximizer_on_reachable_set_attains_static_value() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.problem();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 8).unwrap(), 1, TreeMode::Recombining).unwrap();
    let reach = tic_core::bsde::reachable_set(&p, &tree, 0, 0, 1_000_000).unwrap();
    let y = select_maximizer(&StaticUtility::of(&p), &reach.points, 0, 0).unwrap();
    let sv = static_value(&p, &tree, &SearchOptions::default()).unwrap();
    assert!((y[0] - sv.value).abs() < 1e-12);
}

#[test]
fn scalar_comparison_holds_for_monotone_utility() {
    let ex = tic_core::benchmarks::OneDimExample::new(1.0, 1.0).unwrap();
    let p = ex.problem(ControlSet::scalar(&[-1.0, 1.0]).unwrap()).with_utility(|y: &[f64]| y[0]);
    let tree = path_tree(1.0, 3);
    let eta = TreeRandomVariable::new(3, 1, (0..8).map(|i| (i as f64 * 0.7).sin()).collect());
    let eta2 = TreeRandomVariable::new(3, 1, eta.values.iter().enumerate().map(|(i, v)| v + 0.1 * (i % 3) as f64).collect());
    let r = check_comparison(&StaticUtility::of(&p), &p, &tree, 1, 3, &[(eta.clone(), eta2), (eta.clone(), eta)], 1_000_000).unwrap();
    assert_eq!(r.pairs_tested, 2);
    assert_eq!(r.violations, 0);
}

#[test]
fn static_utility_breaks_comparison_on_the_deterministic_example() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.problem();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 4).unwrap(), 1, TreeMode::Recombining).unwrap();
    let eta = TreeRandomVariable::constant(&tree, 4, &[0.0, 0.0]);
    let eta2 = TreeRandomVariable::constant(&tree, 4, &[0.0, 1.0]);
    let r = check_comparison(&StaticUtility::of(&p), &p, &tree, 0, 4, &[(eta, eta2)], 1_000_000).unwrap();
    assert!(r.violations >= 1, "{r:?}");
}

#[test]
fn constructed_utility_on_deterministic_example_is_y1_minus_t_y2() {
    let tree = path_tree(2.0, 4);
    let phi = build_linear_utility(&deterministic_coeffs(), &tree).unwrap();
    for k in 0..=4 {
        for node in 0..tree.level_len(k) {
            let w = phi.weights[k].node(node);
            assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] + tree.time(k)).abs() < 1e-12, "{w:?}");
        }
    }
}

fn linear_comparison(coeffs: &LinearCoeffs, phi: &dyn DynamicUtility, weights: &TreeRandomVariable, class: tic_core::bsde::ControlClass, steps: usize) -> LinearComparisonReport {
    let tree = path_tree(1.0, steps);
    let p = coeffs.problem(ControlSet::scalar(&[0.0, 1.0]).unwrap(), [0.0, 0.0], 1.5).with_class(class);
    let pairs = aligned_pairs(weights, 50, 7);
    check_linear_comparison(phi, &p, &tree, &pairs, 1_000_000).unwrap()
}

#[test]
fn constructed_utility_satisfies_comparison() {
    use tic_core::bsde::ControlClass::*;
    for (coeffs, class) in [(deterministic_coeffs(), Deterministic), (stochastic_coeffs(), Adapted)] {
        let tree = path_tree(1.0, 3);
        let phi = build_linear_utility(&coeffs, &tree).unwrap();
        let r = linear_comparison(&coeffs, &phi, &phi.weights[3], class, 3);
        eprintln!("{r:?}");
        assert_eq!(r.policy_violations, 0);
        assert_eq!(r.max_violations, 0);
    }
}

#[test]
fn static_utility_control_group_fails_linear_comparison() {
    let coeffs = deterministic_coeffs();
    let tree = path_tree(1.0, 3);
    let phi = StaticUtility(Arc::new(|y: &[f64]| y[0]));
    let weights = TreeRandomVariable::constant(&tree, 3, &[1.0, 0.0]);
    let r = linear_comparison(&coeffs, &phi, &weights, tic_core::bsde::ControlClass::Deterministic, 3);
    assert!(r.max_violations >= 1, "{r:?}");
}

#[test]
fn euler_switching_invariants_and_tail_bound() {
    let coeffs = stochastic_coeffs();
    let cfg = EulerConfig { horizon: 1.0, steps: 2000, paths: 2000, seed: 11 };
    let paths = simulate_switching_paths(&coeffs, &cfg).unwrap();
    let s = summarize_switching(&paths, 0.1);
    eprintln!("{s:?}");
    assert!(s.within_band && s.continuous);
    let pilot = EulerConfig { paths: 500, ..cfg };
    let r = verify_tau_bound(&coeffs, &cfg, &pilot, 6).unwrap();
    eprintln!("C = {:?} m = {}", r.fitted, r.m);
    for row in &r.rows {
        eprintln!("{row:?}");
    }
}
