use proptest::prelude::*;
use tic_core::bsde::{static_value, BsdeProblem, ControlClass, ControlSet, SearchOptions};
use tic_core::lattice::{ScenarioTree, TimeGrid, TreeMode, TreeRandomVariable};
use tic_core::master::{
    check_forward_dpp, check_lipschitz, illposed_demo, illposed_pair, master_residual, path_derivative_probe, random_pairs,
    CylinderFunctional, FdConfig, ForwardValue,
};

fn tree(horizon: f64, steps: usize, mode: TreeMode) -> ScenarioTree {
    ScenarioTree::new(TimeGrid::new(horizon, steps).unwrap(), 1, mode).unwrap()
}

/// Scalar problem with a generator depending on y, z and u.
fn controlled_scalar() -> BsdeProblem {
    BsdeProblem::new(
        1,
        1,
        ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap(),
        1.0,
        |_, y, z, u, out| out[0] = u[0] * z[0] + 0.3 * y[0].sin() - 0.2 * u[0] * u[0],
        |ctx, out| out[0] = ctx.brownian[0].abs(),
        |y| -(y[0] - 0.2).abs(),
    )
}

/// Two-dimensional value with a coupled generator.
fn controlled_pair() -> BsdeProblem {
    BsdeProblem::new(
        2,
        1,
        ControlSet::scalar(&[-0.5, 0.5]).unwrap(),
        1.0,
        |_, y, z, u, out| {
            out[0] = u[0] * z[1] + 0.25 * y[1];
            out[1] = -u[0] * y[0] + 0.5 * z[0];
        },
        |ctx, out| {
            out[0] = ctx.brownian[0];
            out[1] = ctx.brownian[0] * ctx.brownian[0];
        },
        |y| y[0] - 0.5 * y[1] * y[1],
    )
}

fn control_free_linear(a: f64) -> BsdeProblem {
    illposed_pair().0.with_utility(move |y| a * y[0])
}

#[test]
fn forward_value_at_zero_is_the_utility() {
    let t = tree(1.0, 3, TreeMode::Recombining);
    let p = controlled_pair();
    let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
    let y = [0.4, -1.2];
    let eta = TreeRandomVariable::new(0, 2, y.to_vec());
    assert_eq!(fv.value(&eta).unwrap(), p.utility(&y));
}

#[test]
fn forward_value_at_horizon_is_the_static_value() {
    let t = tree(1.0, 3, TreeMode::Recombining);
    for p in [controlled_scalar(), controlled_pair()] {
        let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
        let xi = tic_core::bsde::terminal_variable(&p, &t).unwrap();
        let stat = static_value(&p, &t, &SearchOptions::default()).unwrap();
        assert_eq!(fv.value(&xi).unwrap(), stat.value);
    }
}

#[test]
fn forward_dpp_holds_on_every_split() {
    let configs = [
        (controlled_scalar(), tree(1.0, 3, TreeMode::Recombining)),
        (controlled_scalar(), tree(1.0, 3, TreeMode::Path)),
        (controlled_pair(), tree(0.8, 4, TreeMode::Recombining)),
        (controlled_scalar().with_class(ControlClass::Deterministic), tree(1.0, 6, TreeMode::Recombining)),
        (controlled_pair().with_class(ControlClass::Deterministic), tree(1.0, 6, TreeMode::Path)),
    ];
    for (p, t) in &configs {
        let fv = ForwardValue::new(p, t, SearchOptions::exact_only(1_000_000)).unwrap();
        let n = t.steps();
        let eta = t.random_variable(n, p.value_dim(), |c, o| {
            for (i, v) in o.iter_mut().enumerate() {
                *v = (c.brownian[0] * (i as f64 + 1.0)).cos() - c.time;
            }
        }).unwrap();
        for t1 in 0..=n {
            let r = check_forward_dpp(&fv, t1, &eta).unwrap();
            assert!(r.exact);
            assert!(r.residual <= 1e-12, "{} split {t1}: {r:?}", p.name());
        }
    }
}

#[test]
fn lipschitz_ratio_is_within_the_gronwall_bound() {
    let t = tree(1.0, 3, TreeMode::Recombining);
    let p = controlled_scalar();
    let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
    let pairs = random_pairs(&t, 3, 1, 100, 7);
    let r = check_lipschitz(&fv, &pairs, 1.0).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.fitted > 0.0);
}

#[test]
fn linear_master_residual_is_minus_a_dt() {
    let a = 1.5;
    let p = control_free_linear(a);
    let cyl = CylinderFunctional::time_brownian_squared();
    let mut residuals = Vec::new();
    for n in [4, 8, 16] {
        let t = tree(1.0, n, TreeMode::Recombining);
        let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
        let r = master_residual(&fv, &cyl, n, &FdConfig::default()).unwrap();
        let dt = t.dt();
        assert!((r.left_derivative - a * (2.0 - dt)).abs() < 1e-9);
        assert!((r.transport - 2.0 * a).abs() < 1e-9);
        assert!(r.hamiltonian.abs() < 1e-12);
        assert!((r.residual + a * dt).abs() < 1e-9, "{r:?}");
        residuals.push(r.residual.abs());
    }
    for w in residuals.windows(2) {
        let factor = w[0] / w[1];
        assert!((1.5..=3.0).contains(&factor), "factor {factor}");
    }
}

#[test]
fn controlled_master_residual_shrinks() {
    let p = BsdeProblem::new(
        1,
        1,
        ControlSet::scalar(&[-1.0, 1.0]).unwrap(),
        1.0,
        |_, _, z, u, out| out[0] = u[0] * z[0],
        |ctx, out| out[0] = ctx.brownian[0],
        |y| y[0],
    )
    .with_class(ControlClass::Deterministic);
    let cyl = CylinderFunctional::time_brownian();
    let mut prev = f64::INFINITY;
    for n in [4, 8, 16] {
        let t = tree(1.0, n, TreeMode::Recombining);
        let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
        let r = master_residual(&fv, &cyl, n, &FdConfig::default()).unwrap();
        assert!(r.residual.abs() < prev);
        prev = r.residual.abs();
    }
}

#[test]
fn derivative_probe_is_order_dt_three_halves() {
    let cyl = CylinderFunctional::time_brownian_squared();
    let mut last = None;
    for n in [8, 16, 32] {
        let t = tree(1.0, n, TreeMode::Recombining);
        let probe = path_derivative_probe(&cyl, &t).unwrap();
        assert!(probe.rms_residual <= 4.0 * probe.scale);
        if let Some(prev) = last {
            let factor: f64 = prev / probe.rms_residual;
            assert!(factor > 2.0, "factor {factor}");
        }
        last = Some(probe.rms_residual);
    }
}

#[test]
fn illposed_pair_has_identical_right_sides_and_gap_t() {
    for (horizon, n) in [(1.0, 4), (2.0, 6), (0.5, 8)] {
        let t = tree(horizon, n, TreeMode::Recombining);
        let (f1, f2) = illposed_pair();
        let r = illposed_demo(&f1, &f2, &t, 0.5 * horizon).unwrap();
        assert!(r.rhs_identical);
        assert!((r.gap - horizon).abs() < 1e-12, "{r:?}");
        assert!(r.witness);
    }
}

#[test]
fn illposed_control_group_has_no_gap() {
    let t = tree(1.0, 4, TreeMode::Recombining);
    let (f1, _) = illposed_pair();
    let r = illposed_demo(&f1, &f1.clone(), &t, 0.5).unwrap();
    assert!(r.rhs_identical);
    assert_eq!(r.gap, 0.0);
    assert!(!r.witness);
}

#[test]
fn generators_differing_at_zero_are_rejected() {
    let t = tree(1.0, 4, TreeMode::Recombining);
    let (f1, _) = illposed_pair();
    let f3 = f1.clone().with_generator(|_, _, _, _, out| out[0] = 1.0, 0.0);
    assert!(illposed_demo(&f1, &f3, &t, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_value_is_monotone_for_monotone_utility(
        values in prop::collection::vec(-1.0f64..1.0, 4),
        shift in 0.0f64..0.5,
    ) {
        let t = tree(1.0, 3, TreeMode::Recombining);
        let p = BsdeProblem::new(
            1, 1, ControlSet::scalar(&[-1.0, 1.0]).unwrap(), 1.0,
            |_, _, z, u, out| out[0] = u[0] * z[0],
            |ctx, out| out[0] = ctx.brownian[0],
            |y| y[0],
        );
        let fv = ForwardValue::new(&p, &t, SearchOptions::default()).unwrap();
        let lo = TreeRandomVariable::new(3, 1, values.clone());
        let hi = TreeRandomVariable::new(3, 1, values.iter().map(|v| v + shift).collect());
        prop_assert!(fv.value(&hi).unwrap() >= fv.value(&lo).unwrap() - 1e-12);
    }
}

#[test]
fn reference_problems_satisfy_dpp_and_lipschitz_bounds() {
    let t = tree(1.0, 3, TreeMode::Recombining);
    for rp in tic_core::master::reference_problems() {
        let fv = ForwardValue::new(&rp.problem, &t, SearchOptions::exact_only(1_000_000)).unwrap();
        let pairs = random_pairs(&t, 3, rp.problem.value_dim(), 20, 3);
        let r = check_lipschitz(&fv, &pairs, rp.phi_lipschitz).unwrap();
        assert!(r.passed, "{}: {r:?}", rp.problem.name());
        let d = check_forward_dpp(&fv, 1, &pairs[0].0).unwrap();
        assert!(d.residual <= 1e-12);
    }
}
