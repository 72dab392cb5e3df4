use proptest::prelude::*;
use tic_core::benchmarks::DeterministicExample;
use tic_core::bsde::{reachable_set, ControlSet};
use tic_core::duality::*;
use tic_core::lattice::{ScenarioTree, TimeGrid, TreeMode};

/// `f = 0`, `g(x) = x`: the dual value is `(y - x)^2` at all times.
fn tracking() -> MarkovProblem {
    MarkovProblem::new(
        1,
        ControlSet::scalar(&[0.0]).unwrap(),
        0.0,
        |_, _, _, _, _, out| out[0] = 0.0,
        |x, out| out[0] = x,
        |y| y[0],
    )
}

fn tracking_config(h: f64) -> HjbConfig {
    let z: Vec<f64> = (0..=8).map(|i| i as f64 * 0.25).collect();
    HjbConfig::new(
        0.5,
        2,
        Axis::with_spacing(-1.0, 1.0, h).unwrap(),
        vec![Axis::with_spacing(-1.0, 1.0, h).unwrap()],
        z,
    )
}

#[test]
fn tracking_dual_matches_closed_form_on_trusted_interior() {
    let p = tracking();
    let mut cfg = tracking_config(0.05);
    cfg.substeps = cfg.stable_substeps(&p);
    let g = solve_dual_hjb(&p, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for ix in 0..cfg.x_axis.n {
        let x = cfg.x_axis.value(ix);
        let (pts, vals) = g.slice(0, ix).unwrap();
        for (q, (y, w)) in pts.iter().zip(vals).enumerate() {
            if g.is_trusted(ix, q) {
                worst = worst.max((w - (y[0] - x).powi(2)).abs());
            }
        }
    }
    assert!(worst <= 0.05, "max error {worst}");

    let ix = g.nearest_x(0.0);
    let eps = 2.0 * g.terminal_interpolation_error(&p);
    let nodal = extract_nodal_set(&g, 0, ix, eps).unwrap();
    assert!(!nodal.is_empty());
    assert!(nodal.points.iter().all(|y| y[0].abs() <= 0.05 + 1e-12), "{:?}", nodal.points);
}

#[test]
fn oversized_step_reports_cfl_bound() {
    let p = tracking();
    let cfg = tracking_config(0.05);
    match solve_dual_hjb(&p, &cfg) {
        Err(tic_core::Error::Cfl { dt, max_dt }) => assert!(dt > max_dt && max_dt > 0.0),
        other => panic!("expected a CFL error, got {:?}", other.map(|g| g.dt)),
    }
}

#[test]
fn single_point_x_axis_rejected_for_x_dependent_problem() {
    let p = tracking();
    let cfg = HjbConfig::new(0.5, 2, Axis::point(0.0), vec![Axis::new(-1.0, 1.0, 11).unwrap()], vec![0.0]);
    assert!(solve_dual_hjb(&p, &cfg).is_err());
}

#[test]
fn deterministic_dual_value_within_tolerance_at_64_levels() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.markov();
    let h = 0.025;
    let mut cfg = HjbConfig::new(
        2.0,
        64,
        Axis::point(0.0),
        vec![Axis::with_spacing(-1.0, 1.0, h).unwrap(), Axis::with_spacing(-0.8, 2.8, h).unwrap()],
        vec![0.0, 0.0],
    );
    cfg.substeps = cfg.stable_substeps(&p);
    let g = solve_dual_hjb(&p, &cfg).unwrap();
    let eps = 2.0 * g.terminal_interpolation_error(&p);
    assert!((eps - h * h).abs() < 1e-12);
    let nodal = extract_nodal_set(&g, 0, 0, eps).unwrap();
    assert!(!nodal.touches_untrusted);
    let dual = dual_static_value(&nodal, &|y| y[0], None).unwrap();
    assert!((dual.value - 0.5).abs() <= 5e-2, "{}", dual.value);
}

#[test]
fn empty_nodal_set_is_a_precondition_error() {
    let nodal = NodalSet { level: 0, eps: 1e-9, points: vec![], touches_untrusted: false };
    assert!(matches!(dual_static_value(&nodal, &|y| y[0], None), Err(tic_core::Error::Precondition(_))));
}

fn small_deterministic_tree() -> ScenarioTree {
    ScenarioTree::new(TimeGrid::new(2.0, 5).unwrap(), 1, TreeMode::Recombining).unwrap()
}

#[test]
fn tree_dual_vanishes_exactly_on_reachable_points() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let problem = ex.problem();
    let tree = small_deterministic_tree();
    let reach = reachable_set(&problem, &tree, 0, 0, 1_000_000).unwrap();
    let dual = DirectDual::new(&problem, &tree, vec![0.0, 0.0], 1_000_000).unwrap();
    for y in &reach.points {
        let w = dual.value(0, 0, y).unwrap();
        assert!(w < 1e-24, "W({y:?}) = {w}");
    }
    assert!(dual.value(0, 0, &[0.9, 1.0]).unwrap() > 1e-3);
}

#[test]
fn tree_dual_of_tracking_problem_is_squared_distance() {
    let p = tracking().to_bsde();
    let tree = ScenarioTree::new(TimeGrid::new(1.0, 3).unwrap(), 1, TreeMode::Path).unwrap();
    let dual = DirectDual::new(&p, &tree, vec![0.0, 0.5, 1.0, 1.5], 1_000_000).unwrap();
    for node in 0..tree.level_len(1) {
        let b = tree.brownian(1, node)[0];
        for y in [-0.5, 0.0, 0.25] {
            assert!((dual.value(1, node, &[y]).unwrap() - (y - b).powi(2)).abs() < 1e-14);
        }
    }
}

fn geometric_rho(problem: &tic_core::bsde::BsdeProblem, tree: &ScenarioTree, z: Vec<f64>, axes: &[Axis], k: (usize, usize), eps: f64) -> GeometricDppReport {
    let dual = DirectDual::new(problem, tree, z, 10_000_000).unwrap();
    check_geometric_dpp(&dual, k.0, 0, k.1, axes, eps).unwrap()
}

#[test]
fn geometric_dpp_holds_and_rho_shrinks_for_tracking() {
    let p = tracking().to_bsde();
    let tree = ScenarioTree::new(TimeGrid::new(1.0, 3).unwrap(), 1, TreeMode::Path).unwrap();
    let mut last = f64::INFINITY;
    for h in [0.2, 0.1] {
        let axes = [Axis::with_spacing(-1.0, 1.0, h).unwrap()];
        let r = geometric_rho(&p, &tree, vec![0.0, 0.5, 1.0], &axes, (0, 2), h * h);
        assert!(r.passed, "{r:?}");
        assert!(r.rho < last);
        last = r.rho;
    }
}

#[test]
fn geometric_dpp_holds_and_rho_shrinks_for_deterministic_example() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let p = ex.problem();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 4).unwrap(), 1, TreeMode::Recombining).unwrap();
    let mut last = f64::INFINITY;
    for h in [0.2, 0.1] {
        let axes = [Axis::with_spacing(-0.6, 0.6, h).unwrap(), Axis::with_spacing(-0.2, 2.2, h).unwrap()];
        let r = geometric_rho(&p, &tree, vec![0.0, 0.0], &axes, (1, 3), h * h);
        assert!(r.passed, "{r:?}");
        assert!(r.rho < last);
        last = r.rho;
    }
}

proptest! {
    #[test]
    fn hausdorff_is_zero_on_equal_sets_and_symmetric(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..20),
        shift in -1.0f64..1.0,
    ) {
        let (a, b) = hausdorff(&pts, &pts);
        prop_assert_eq!((a, b), (0.0, 0.0));
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + shift, p[1]]).collect();
        let (ab, ba) = hausdorff(&pts, &moved);
        let (ba2, ab2) = hausdorff(&moved, &pts);
        prop_assert_eq!((ab, ba), (ab2, ba2));
        prop_assert!(ab <= shift.abs() + 1e-12);
    }

    #[test]
    fn w_regularity_of_quadratic_is_bounded(c in 0.1f64..3.0) {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![-2.0 + 0.08 * i as f64]).collect();
        let vals: Vec<f64> = pts.iter().map(|p| c * p[0] * p[0]).collect();
        let fit = check_w_regularity(&pts, &vals);
        prop_assert!(fit.fitted_c <= c + 1e-12);
    }
}
