use proptest::prelude::*;
use tic_core::lattice::{ScenarioTree, TimeGrid, TreeMode, TreeRandomVariable};

fn tree(horizon: f64, steps: usize, dim: usize, mode: TreeMode) -> ScenarioTree {
    ScenarioTree::new(TimeGrid::new(horizon, steps).unwrap(), dim, mode).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn brownian_is_a_martingale_with_quadratic_variation_dt() {
    for (dim, mode) in [(1, TreeMode::Recombining), (2, TreeMode::Recombining), (1, TreeMode::Path), (2, TreeMode::Path)] {
        let t = tree(1.3, 6, dim, mode);
        let dt = t.dt();
        for k in 0..t.steps() {
            let next = t.random_variable(k + 1, dim, |c, o| o.copy_from_slice(c.brownian)).unwrap();
            let cond = t.conditional_expectation(&next, k).unwrap();
            let here = t.random_variable(k, dim, |c, o| o.copy_from_slice(c.brownian)).unwrap();
            assert!(max_diff(&cond.values, &here.values) < 1e-14, "martingale at level {k}");

            // E[dB_i dB_j | F_k] = dt delta_ij
            for node in 0..t.level_len(k) {
                let b = t.brownian(k, node);
                let mut acc = vec![0.0; dim * dim];
                for c in 0..t.branching() {
                    let nb = t.brownian(k + 1, t.child(k, node, c));
                    for i in 0..dim {
                        for j in 0..dim {
                            acc[i * dim + j] += (nb[i] - b[i]) * (nb[j] - b[j]) / t.branching() as f64;
                        }
                    }
                }
                for i in 0..dim {
                    for j in 0..dim {
                        let want = if i == j { dt } else { 0.0 };
                        assert!((acc[i * dim + j] - want).abs() < 1e-14);
                    }
                }
            }
        }
    }
}

#[test]
fn recombining_and_path_trees_agree_on_markov_functionals() {
    let f = |t: f64, b: &[f64]| (b[0] * 0.7).sin() + t * b[0] * b[0] - 0.3 * b[0].powi(3);
    let rec = tree(1.0, 8, 1, TreeMode::Recombining);
    let path = tree(1.0, 8, 1, TreeMode::Path);
    let xr = rec.random_variable(8, 1, |c, o| o[0] = f(c.time, c.brownian)).unwrap();
    let xp = path.random_variable(8, 1, |c, o| o[0] = f(c.time, c.brownian)).unwrap();
    for k in 0..=8 {
        let er = rec.conditional_expectation(&xr, k).unwrap();
        let ep = path.conditional_expectation(&xp, k).unwrap();
        for node in 0..path.level_len(k) {
            let b = path.brownian(k, node);
            let ups = ((b[0] / path.sqrt_dt() + k as f64) / 2.0).round() as usize;
            let idx = (0..rec.level_len(k)).find(|&i| (rec.brownian(k, i)[0] - b[0]).abs() < 1e-12).unwrap();
            assert!(ups <= k);
            assert!((er.node(idx)[0] - ep.node(node)[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn expectation_of_squared_brownian_is_time() {
    let t = tree(2.0, 10, 1, TreeMode::Recombining);
    for k in 0..=10 {
        let x = t.random_variable(k, 1, |c, o| o[0] = c.brownian[0] * c.brownian[0]).unwrap();
        assert!((t.expectation(&x).unwrap()[0] - t.time(k)).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn tower_property_holds(
        seed_values in prop::collection::vec(-1.0f64..1.0, 64),
        j in 0usize..6,
        i_off in 0usize..6,
    ) {
        let t = tree(1.0, 6, 1, TreeMode::Path);
        let rv = TreeRandomVariable::new(6, 1, seed_values);
        let i = j.min(i_off);
        let direct = t.conditional_expectation(&rv, i).unwrap();
        let via = t.conditional_expectation(&t.conditional_expectation(&rv, j).unwrap(), i).unwrap();
        prop_assert!(max_diff(&direct.values, &via.values) < 1e-14);
    }

    #[test]
    fn conditional_expectation_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 7),
        b in prop::collection::vec(-1.0f64..1.0, 7),
        s in -2.0f64..2.0,
    ) {
        let t = tree(0.5, 6, 1, TreeMode::Recombining);
        let (ra, rb) = (TreeRandomVariable::new(6, 1, a.clone()), TreeRandomVariable::new(6, 1, b.clone()));
        let sum = TreeRandomVariable::new(6, 1, a.iter().zip(&b).map(|(x, y)| x + s * y).collect());
        let (ea, eb, es) = (t.expectation(&ra).unwrap()[0], t.expectation(&rb).unwrap()[0], t.expectation(&sum).unwrap()[0]);
        prop_assert!((es - (ea + s * eb)).abs() < 1e-14);
    }
}
