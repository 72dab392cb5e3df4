use tic_core::benchmarks::*;
use tic_core::bsde::{static_value, ControlSet, SearchOptions};
use tic_core::lattice::{ScenarioTree, TimeGrid, TreeMode};

fn path_tree(horizon: f64, steps: usize) -> ScenarioTree {
    ScenarioTree::new(TimeGrid::new(horizon, steps).unwrap(), 1, TreeMode::Path).unwrap()
}

#[test]
fn mean_variance_tree_feedback_is_grid_optimal_at_time_zero() {
    let mv = MeanVariance::new(1.0, 1.0, 1.0).unwrap();
    let tree = path_tree(1.0, 8);
    let star = mv.tree_feedback(8);
    let v0 = mv.objective(&tree, 0, 0, mv.x0, star, mv.c).unwrap();
    for (da, db) in [(0.05, 0.0), (-0.05, 0.0), (0.0, 0.02), (0.0, -0.02), (0.03, -0.01)] {
        let v = mv.objective(&tree, 0, 0, mv.x0, (star.0 + da, star.1 + db), mv.c).unwrap();
        assert!(v < v0, "perturbation ({da}, {db}) improved {v} over {v0}");
    }
}

#[test]
fn mean_variance_restoration_removes_all_violations() {
    let mv = MeanVariance::new(1.0, 1.0, 1.0).unwrap();
    let tree = path_tree(1.0, 6);
    let restored = mean_variance_consistency(&mv, &tree, 3, (0.1, 0.05), true).unwrap();
    let fixed = mean_variance_consistency(&mv, &tree, 3, (0.1, 0.05), false).unwrap();
    eprintln!("{restored:?}\n{fixed:?}");
    assert_eq!(restored.violations, 0);
    assert!(fixed.violations >= 1);
}

#[test]
fn analytic_mean_variance_feedback_is_near_the_tree_optimum() {
    let mv = MeanVariance::new(1.0, 1.0, 1.0).unwrap();
    let tree = path_tree(1.0, 12);
    let best = mv.objective(&tree, 0, 0, mv.x0, mv.tree_feedback(12), mv.c).unwrap();
    let analytic = mv.objective(&tree, 0, 0, mv.x0, mv.analytic_feedback(), mv.c).unwrap();
    eprintln!("tree {best} analytic {analytic}");
    assert!(best >= analytic);
    assert!(best - analytic < 0.02);
}

#[test]
fn one_dim_restoration() {
    let ex = OneDimExample::new(1.0, 1.0).unwrap();
    let tree = path_tree(1.0, 4);
    let controls = ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap();
    let restored = one_dim_consistency(&ex, &tree, &controls, 1_000_000, true).unwrap();
    let fixed = one_dim_consistency(&ex, &tree, &controls, 1_000_000, false).unwrap();
    eprintln!("{restored:?}\n{fixed:?}");
    assert_eq!(restored.violations, 0);
    assert!(restored.nodes_checked > 0);
}

#[test]
fn one_dim_static_value_matches_closed_form() {
    let ex = OneDimExample::new(1.5, 1.0).unwrap();
    let tree = path_tree(1.0, 3);
    let sv = static_value(&ex.problem(OneDimExample::default_controls()), &tree, &SearchOptions::default()).unwrap();
    assert!((sv.value - ex.static_value().unwrap()).abs() < 1e-12, "{}", sv.value);
}

#[test]
fn principal_agent_restoration() {
    let pa = PrincipalAgent::new(1.0, 2.0, -1.0, 1.0).unwrap();
    let tree = path_tree(1.0, 6);
    let restored = principal_agent_consistency(&pa, &tree, 2, 0.1, true).unwrap();
    let fixed = principal_agent_consistency(&pa, &tree, 2, 0.1, false).unwrap();
    eprintln!("{restored:?}\n{fixed:?}");
    assert_eq!(restored.violations, 0);
    assert!(fixed.violations >= 1);
}

#[test]
fn deterministic_primal_matches_discrete_optimum() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let tree = ScenarioTree::new(TimeGrid::new(2.0, 8).unwrap(), 1, TreeMode::Recombining).unwrap();
    let sv = static_value(&ex.problem(), &tree, &SearchOptions::default()).unwrap();
    assert!(sv.exact);
    assert!((sv.value - ex.tree_value(8, 0)).abs() < 1e-12, "{} vs {}", sv.value, ex.tree_value(8, 0));
}

#[test]
fn deterministic_reoptimization_disagrees_exactly_on_the_predicted_window() {
    let ex = DeterministicExample::new(2.0).unwrap();
    let w = deterministic_inconsistency(&ex, 16, 1_000_000).unwrap();
    for r in &w.rows {
        assert!(r.matches, "{r:?}");
    }
    assert!(w.passed);
    let mid = &w.rows[3];
    assert!(!mid.expected.is_empty() && mid.margin > 0.0);
}

#[test]
fn one_dim_static_utility_switches_to_plus_one_below_the_barrier() {
    let ex = OneDimExample::new(1.0, 1.0).unwrap();
    for n in [6, 8] {
        let tree = path_tree(1.0, n);
        let w = one_dim_inconsistency(&ex, &tree, &OneDimExample::default_controls(), 2_000_000).unwrap();
        eprintln!("{w:?}");
        assert!(w.passed, "{w:?}");
    }
}
