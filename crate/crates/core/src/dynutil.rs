//! Dynamic utilities `Phi(t, omega, y)` that make the induced family of
//! problems time consistent.
//!
//! Three constructions live here: the forward-maximized utility of problems
//! with deterministic data, the comparison-principle diagnostic, and the
//! linear construction with a Riccati-type weight process that switches its
//! normalization whenever the ratio of the two weights reaches magnitude 2.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeProblem, ControlClass, ControlSet, Engine, Policy, SearchOptions, Segment};
use crate::error::{Error, Result};
use crate::lattice::{ScenarioTree, TreeMode, TreeRandomVariable};

/// Absolute tolerance of the comparison checks on general utilities.
pub const COMPARISON_TOL: f64 = 1e-10;
/// Absolute tolerance of the comparison checks on linear utilities.
pub const LINEAR_COMPARISON_TOL: f64 = 1e-8;
/// Ratio magnitude that triggers a switch of normalization.
pub const SWITCH_LEVEL: f64 = 2.0;

/// A time-indexed utility evaluated at tree nodes.
pub trait DynamicUtility: Send + Sync {
    fn value(&self, level: usize, node: usize, y: &[f64]) -> f64;
}

/// The static utility used at every time: `Phi(t, y) = phi(y)`.
pub struct StaticUtility(pub Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl StaticUtility {
    pub fn of(problem: &BsdeProblem) -> Self {
        Self(problem.utility_fn())
    }
}

impl DynamicUtility for StaticUtility {
    fn value(&self, _: usize, _: usize, y: &[f64]) -> f64 {
        (self.0)(y)
    }
}

/// Forward-maximized utility of a problem whose driver, terminal value and
/// controls are deterministic: `Phi(t_k, y) = max_u phi(Y^{t_k, y, u}_0)`
/// over deterministic controls on `[0, t_k]`.
pub fn deterministic_phi(problem: &BsdeProblem, tree: &ScenarioTree, k: usize, y: &[f64], cap: u64) -> Result<f64> {
    tree.check_level(k)?;
    if problem.class() != ControlClass::Deterministic {
        return Err(Error::Precondition("deterministic Phi needs deterministic controls".into()));
    }
    if y.len() != problem.value_dim() {
        return Err(Error::Dimension(format!("y has {} entries, expected {}", y.len(), problem.value_dim())));
    }
    if k == 0 {
        return Ok(problem.utility(y));
    }
    let engine = Engine::new(problem, tree)?;
    let seg = Segment::full(tree, 0, k)?;
    let eta = TreeRandomVariable::constant(tree, k, y);
    let terminal = seg.gather_terminal(&eta)?;
    let utility = problem.utility_fn();
    let opt = engine.optimize(&seg, &terminal, &|v| utility(v), &SearchOptions::exact_only(cap))?;
    Ok(opt.value)
}

/// [`deterministic_phi`] packaged as a [`DynamicUtility`]; every evaluation
/// re-enumerates the controls on `[0, t_k]`.
pub struct DeterministicPhi<'a> {
    pub problem: &'a BsdeProblem,
    pub tree: &'a ScenarioTree,
    pub cap: u64,
}

impl DynamicUtility for DeterministicPhi<'_> {
    fn value(&self, level: usize, _: usize, y: &[f64]) -> f64 {
        deterministic_phi(self.problem, self.tree, level, y, self.cap).unwrap_or(f64::NAN)
    }
}

/// Verdict of the comparison check for one pair of terminal variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub pair: usize,
    /// False when the premise `Phi(t2, eta) <= Phi(t2, eta~)` failed somewhere.
    pub premise_holds: bool,
    pub violations: usize,
    /// Largest `max_u Phi(t1, Y(eta)) - max_u Phi(t1, Y(eta~))` seen.
    pub worst_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub t1: usize,
    pub t2: usize,
    pub tolerance: f64,
    pub pairs_tested: usize,
    pub pairs_skipped: usize,
    pub nodes_checked: usize,
    pub violations: usize,
    pub worst_slack: f64,
    pub verdicts: Vec<PairVerdict>,
}

/// Comparison principle between levels `t1 < t2`: for every pair whose
/// premise holds node-wise at `t2`, checks at every level-`t1` node that
/// `max_u Phi(t1, Y^u_{t1}(t2, eta)) <= max_u Phi(t1, Y^u_{t1}(t2, eta~))`.
pub fn check_comparison(
    phi: &dyn DynamicUtility,
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    t1: usize,
    t2: usize,
    pairs: &[(TreeRandomVariable, TreeRandomVariable)],
    cap: u64,
) -> Result<ComparisonReport> {
    if t1 >= t2 {
        return Err(Error::InvalidArgument(format!("need t1 < t2, got {t1} and {t2}")));
    }
    tree.check_level(t2)?;
    let engine = Engine::new(problem, tree)?;
    let opts = SearchOptions::exact_only(cap);
    let mut report = ComparisonReport {
        t1,
        t2,
        tolerance: COMPARISON_TOL,
        pairs_tested: 0,
        pairs_skipped: 0,
        nodes_checked: 0,
        violations: 0,
        worst_slack: f64::NEG_INFINITY,
        verdicts: Vec::with_capacity(pairs.len()),
    };
    for (i, (eta, eta2)) in pairs.iter().enumerate() {
        if eta.level != t2 || eta2.level != t2 {
            return Err(Error::InvalidArgument(format!("pair {i} does not live at level {t2}")));
        }
        let premise = (0..tree.level_len(t2))
            .all(|n| phi.value(t2, n, eta.node(n)) <= phi.value(t2, n, eta2.node(n)));
        let mut verdict = PairVerdict { pair: i, premise_holds: premise, violations: 0, worst_slack: f64::NEG_INFINITY };
        if !premise {
            report.pairs_skipped += 1;
            report.verdicts.push(verdict);
            continue;
        }
        report.pairs_tested += 1;
        for node in 0..tree.level_len(t1) {
            let seg = Segment::cone(tree, t1, node, t2)?;
            let objective = |y: &[f64]| phi.value(t1, node, y);
            let a = engine.optimize(&seg, &seg.gather_terminal(eta)?, &objective, &opts)?.value;
            let b = engine.optimize(&seg, &seg.gather_terminal(eta2)?, &objective, &opts)?.value;
            let slack = a - b;
            report.nodes_checked += 1;
            verdict.worst_slack = verdict.worst_slack.max(slack);
            if slack > COMPARISON_TOL {
                verdict.violations += 1;
            }
        }
        report.violations += verdict.violations;
        report.worst_slack = report.worst_slack.max(verdict.worst_slack);
        report.verdicts.push(verdict);
    }
    Ok(report)
}

/// Among candidates maximizing `Phi(level, node, .)` within `1e-10`, the
/// lexicographically largest point.
pub fn select_maximizer(phi: &dyn DynamicUtility, candidates: &[Vec<f64>], level: usize, node: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Precondition(format!("no candidates at level {level}, node {node}")));
    }
    let values: Vec<f64> = candidates.iter().map(|y| phi.value(level, node, y)).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let winner = candidates
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v >= best - COMPARISON_TOL)
        .map(|(y, _)| y)
        .max_by(|a, b| crate::bsde::lex_cmp(a, b))
        .expect("non-empty");
    Ok(winner.clone())
}

type Matrix2 = [[f64; 2]; 2];

/// Coefficients of a two-dimensional linear problem
/// `f_i = sum_j alpha^{ij} y_j + beta^{ij} z_j + c_i(t, u)` with one noise
/// dimension, and the linear utility `phi(y) = a_1 y_1 + a_2 y_2`.
///
/// `alpha` and `beta` may depend on time and the current Brownian value.
#[derive(Clone)]
pub struct LinearCoeffs {
    pub alpha: Arc<dyn Fn(f64, f64) -> Matrix2 + Send + Sync>,
    pub beta: Arc<dyn Fn(f64, f64) -> Matrix2 + Send + Sync>,
    pub c: Arc<dyn Fn(f64, &[f64]) -> [f64; 2] + Send + Sync>,
    pub a: [f64; 2],
}

impl std::fmt::Debug for LinearCoeffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearCoeffs")
            .field("alpha(0,0)", &(self.alpha)(0.0, 0.0))
            .field("beta(0,0)", &(self.beta)(0.0, 0.0))
            .field("a", &self.a)
            .finish()
    }
}

impl LinearCoeffs {
    /// Constant `alpha`, `beta` and `c(u) = (u_0, u_0)` scaled by `c_scale`.
    pub fn constant(alpha: Matrix2, beta: Matrix2, c_scale: [f64; 2], a: [f64; 2]) -> Self {
        Self {
            alpha: Arc::new(move |_, _| alpha),
            beta: Arc::new(move |_, _| beta),
            c: Arc::new(move |_, u| [c_scale[0] * u[0], c_scale[1] * u[0]]),
            a,
        }
    }

    /// Rejects `a = 0` and unbounded or non-finite coefficients on a probe
    /// grid of `(t, b)`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.a == [0.0, 0.0] {
            return Err(Error::Precondition(
                "a_1 = a_2 = 0: the value is identically zero and no utility is needed".into(),
            ));
        }
        for i in 0..=8 {
            let t = horizon * i as f64 / 8.0;
            for j in -8..=8 {
                let b = j as f64 * 0.5 * horizon.sqrt().max(1.0);
                let (al, be) = ((self.alpha)(t, b), (self.beta)(t, b));
                if al.iter().chain(&be).flatten().any(|v| !v.is_finite() || v.abs() > 1e6) {
                    return Err(Error::ProblemValidation(format!("coefficients unbounded or non-finite at t = {t}, b = {b}")));
                }
            }
        }
        Ok(())
    }

    /// Coefficients with the roles of the two components exchanged.
    fn swapped(m: Matrix2) -> Matrix2 {
        [[m[1][1], m[1][0]], [m[0][1], m[0][0]]]
    }

    /// Drift and diffusion of the weight ratio in regime `regime`
    /// (1: ratio `A^1 / A^2`, 2: ratio `A^2 / A^1`).
    pub fn ratio_coefficients(&self, regime: u8, t: f64, b: f64, x: f64) -> (f64, f64) {
        let (mut al, mut be) = ((self.alpha)(t, b), (self.beta)(t, b));
        if regime == 2 {
            al = Self::swapped(al);
            be = Self::swapped(be);
        }
        let sigma = -be[0][1] * x * x + (be[0][0] - be[1][1]) * x + be[1][0];
        let drift = be[0][1] * be[0][1] * x * x * x
            - (al[0][1] + be[0][1] * (be[0][0] - be[1][1]) - be[0][1] * be[1][1]) * x * x
            + (al[0][0] - al[1][1] - be[1][1] * (be[0][0] - be[1][1]) - be[0][1] * be[1][0]) * x
            + (al[1][0] - be[1][0] * be[1][1]);
        (drift, sigma)
    }

    /// Truncated coefficients, with the state clamped to `[-2, 2]`.
    fn truncated(&self, regime: u8, t: f64, b: f64, x: f64) -> (f64, f64) {
        self.ratio_coefficients(regime, t, b, x.clamp(-SWITCH_LEVEL, SWITCH_LEVEL))
    }

    /// The linear problem on one noise dimension with the given controls.
    pub fn problem(&self, controls: ControlSet, terminal: [f64; 2], lipschitz: f64) -> BsdeProblem {
        let (alpha, beta, c) = (self.alpha.clone(), self.beta.clone(), self.c.clone());
        let a = self.a;
        BsdeProblem::new(
            2,
            1,
            controls,
            lipschitz,
            move |ctx, y, z, u, out| {
                let (al, be) = (alpha(ctx.time, ctx.brownian[0]), beta(ctx.time, ctx.brownian[0]));
                let cu = c(ctx.time, u);
                for i in 0..2 {
                    out[i] = al[i][0] * y[0] + al[i][1] * y[1] + be[i][0] * z[0] + be[i][1] * z[1] + cu[i];
                }
            },
            move |_, out| out.copy_from_slice(&terminal),
            move |y| a[0] * y[0] + a[1] * y[1],
        )
        .named("linear")
    }
}

/// Weight process of the linear utility along one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingPath {
    pub times: Vec<f64>,
    /// Ratio in the active normalization.
    pub ratio: Vec<f64>,
    /// 1 while `A^2` is frozen, 2 while `A^1` is frozen.
    pub regime: Vec<u8>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub is_switch: Vec<bool>,
    /// Switch times `tau_n < T`.
    pub switches: Vec<f64>,
    /// Largest `|ratio| - 2` at a switch.
    pub max_overshoot: f64,
    /// Largest weight jump across a switch (should be rounding only).
    pub max_weight_jump: f64,
    /// Largest single-step change of the weights.
    pub max_increment: f64,
}

impl SwitchingPath {
    fn start(coeffs: &LinearCoeffs, capacity: usize) -> (Self, u8, f64, f64) {
        let [a1, a2] = coeffs.a;
        // Normalize by the larger weight so the starting ratio is at most 1.
        let (regime, ratio, frozen) = if a1.abs() <= a2.abs() { (1, a1 / a2, a2) } else { (2, a2 / a1, a1) };
        let path = SwitchingPath {
            times: Vec::with_capacity(capacity),
            ratio: Vec::with_capacity(capacity),
            regime: Vec::with_capacity(capacity),
            a1: Vec::with_capacity(capacity),
            a2: Vec::with_capacity(capacity),
            is_switch: Vec::with_capacity(capacity),
            switches: Vec::new(),
            max_overshoot: 0.0,
            max_weight_jump: 0.0,
            max_increment: 0.0,
        };
        (path, regime, ratio, frozen)
    }

    fn weights(regime: u8, ratio: f64, frozen: f64) -> (f64, f64) {
        if regime == 1 {
            (frozen * ratio, frozen)
        } else {
            (frozen, frozen * ratio)
        }
    }

    /// Runs the switching scheme over the increments `db` (step `dt`);
    /// `brownian(j)` supplies `B_{t_j}` for the coefficients.
    fn simulate(coeffs: &LinearCoeffs, dt: f64, db: &[f64], brownian: impl Fn(usize) -> f64) -> Self {
        let n = db.len();
        let (mut path, mut regime, mut ratio, mut frozen) = Self::start(coeffs, n + 1);
        let (w1, w2) = Self::weights(regime, ratio, frozen);
        path.push(0.0, ratio, regime, w1, w2, false);
        for j in 0..n {
            let t = j as f64 * dt;
            let (drift, sigma) = coeffs.truncated(regime, t, brownian(j), ratio);
            ratio += drift * dt + sigma * db[j];
            let t_next = (j + 1) as f64 * dt;
            let (w1, w2) = Self::weights(regime, ratio, frozen);
            let mut switched = false;
            if ratio.abs() >= SWITCH_LEVEL && j + 1 < n {
                path.switches.push(t_next);
                path.max_overshoot = path.max_overshoot.max(ratio.abs() - SWITCH_LEVEL);
                // The weight that was moving becomes the frozen one.
                frozen = if regime == 1 { w1 } else { w2 };
                regime = 3 - regime;
                ratio = 1.0 / ratio;
                let (v1, v2) = Self::weights(regime, ratio, frozen);
                path.max_weight_jump = path.max_weight_jump.max((v1 - w1).abs().max((v2 - w2).abs()));
                switched = true;
            }
            path.push(t_next, ratio, regime, w1, w2, switched);
        }
        path
    }

    fn push(&mut self, t: f64, ratio: f64, regime: u8, a1: f64, a2: f64, switch: bool) {
        if let (Some(&p1), Some(&p2)) = (self.a1.last(), self.a2.last()) {
            self.max_increment = self.max_increment.max((a1 - p1).abs().max((a2 - p2).abs()));
        }
        self.times.push(t);
        self.ratio.push(ratio);
        self.regime.push(regime);
        self.a1.push(a1);
        self.a2.push(a2);
        self.is_switch.push(switch);
    }

    /// Number of switches before the horizon.
    pub fn switch_count(&self) -> usize {
        self.switches.len()
    }

    /// `tau_n` (1-based), or `None` when fewer than `n` switches occur
    /// before the horizon.
    pub fn tau(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.switches.get(i).copied())
    }
}

/// Linear utility `Phi(t_k, node, y) = A^1 y_1 + A^2 y_2` with weights on
/// every node of a path-mode tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearUtility {
    /// Weights per level, two per node.
    pub weights: Vec<TreeRandomVariable>,
    /// Switch count along the path to each terminal node.
    pub switches: Vec<usize>,
}

impl DynamicUtility for LinearUtility {
    fn value(&self, level: usize, node: usize, y: &[f64]) -> f64 {
        let w = self.weights[level].node(node);
        w[0] * y[0] + w[1] * y[1]
    }
}

/// Builds the linear utility on a path-mode tree by running the switching
/// scheme along every path with the tree's own increments.
pub fn build_linear_utility(coeffs: &LinearCoeffs, tree: &ScenarioTree) -> Result<LinearUtility> {
    coeffs.validate(tree.grid().horizon())?;
    if tree.mode() != TreeMode::Path || tree.dim() != 1 {
        return Err(Error::Precondition("the linear utility needs a one-dimensional path-mode tree".into()));
    }
    let n = tree.steps();
    let leaves = tree.level_len(n);
    let mut weights: Vec<TreeRandomVariable> =
        (0..=n).map(|k| TreeRandomVariable::new(k, 2, vec![0.0; tree.level_len(k) * 2])).collect();
    let mut switches = Vec::with_capacity(leaves);
    for leaf in 0..leaves {
        let path = tree.path(n, leaf)?;
        let db: Vec<f64> = (0..n).map(|j| path.point(j + 1)[0] - path.point(j)[0]).collect();
        let sp = SwitchingPath::simulate(coeffs, tree.dt(), &db, |j| path.point(j)[0]);
        for k in 0..=n {
            // Path-mode nodes at level k are the leading k bits of the leaf.
            let node = leaf >> (n - k);
            weights[k].node_mut(node).copy_from_slice(&[sp.a1[k], sp.a2[k]]);
        }
        switches.push(sp.switch_count());
    }
    Ok(LinearUtility { weights, switches })
}

/// Euler simulation settings for the linear weight process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

fn euler_increments(cfg: &EulerConfig, path: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path as u64);
    let sq = (cfg.horizon / cfg.steps as f64).sqrt();
    (0..cfg.steps).map(|_| sq * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
}

/// Simulates `paths` independent weight paths; path `i` draws from stream
/// `i` of the seeded generator, so results do not depend on scheduling.
pub fn simulate_switching_paths(coeffs: &LinearCoeffs, cfg: &EulerConfig) -> Result<Vec<SwitchingPath>> {
    coeffs.validate(cfg.horizon)?;
    if cfg.steps == 0 || cfg.paths == 0 {
        return Err(Error::InvalidArgument("Euler simulation needs steps and paths".into()));
    }
    let dt = cfg.horizon / cfg.steps as f64;
    Ok((0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let db = euler_increments(cfg, i);
            let mut b = Vec::with_capacity(db.len() + 1);
            b.push(0.0);
            for d in &db {
                b.push(b.last().unwrap() + d);
            }
            SwitchingPath::simulate(coeffs, dt, &db, |j| b[j])
        })
        .collect())
}

/// Summary of the switching invariants over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSummary {
    pub paths: usize,
    pub switches: usize,
    pub max_overshoot: f64,
    /// Largest `|1/2 - |ratio||` right after a switch.
    pub max_band_error: f64,
    pub max_ratio: f64,
    pub max_weight_jump: f64,
    pub max_increment: f64,
    pub within_band: bool,
    pub continuous: bool,
}

pub fn summarize_switching(paths: &[SwitchingPath], slack: f64) -> SwitchingSummary {
    let mut s = SwitchingSummary {
        paths: paths.len(),
        switches: 0,
        max_overshoot: 0.0,
        max_band_error: 0.0,
        max_ratio: 0.0,
        max_weight_jump: 0.0,
        max_increment: 0.0,
        within_band: true,
        continuous: true,
    };
    for p in paths {
        s.switches += p.switch_count();
        s.max_overshoot = s.max_overshoot.max(p.max_overshoot);
        s.max_weight_jump = s.max_weight_jump.max(p.max_weight_jump);
        s.max_increment = s.max_increment.max(p.max_increment);
        for (j, &r) in p.ratio.iter().enumerate() {
            if p.is_switch[j] {
                s.max_band_error = s.max_band_error.max((r.abs() - 0.5).abs());
            } else {
                s.max_ratio = s.max_ratio.max(r.abs());
            }
        }
    }
    s.within_band = s.max_overshoot <= slack && s.max_band_error <= slack && s.max_ratio <= SWITCH_LEVEL + slack;
    s.continuous = s.max_weight_jump <= s.max_increment.max(1e-12);
    s
}

/// Fitted constant of `E[sup_{s <= t} |X_s - X_0|^2] <= C t` for the
/// truncated ratio dynamics, times a safety factor 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConstant {
    pub raw: f64,
    pub c: f64,
    pub delta: f64,
}

/// Pilot fit over both regimes, started from the initial ratio and from
/// `+-1/2` (the post-switch states).
pub fn fit_moment_constant(coeffs: &LinearCoeffs, cfg: &EulerConfig) -> FittedConstant {
    let dt = cfg.horizon / cfg.steps as f64;
    let [a1, a2] = coeffs.a;
    let initial = if a1.abs() <= a2.abs() { (1, a1 / a2) } else { (2, a2 / a1) };
    let starts = [initial, (1, 0.5), (1, -0.5), (2, 0.5), (2, -0.5)];
    let mut raw: f64 = 0.0;
    for (si, &(regime, x0)) in starts.iter().enumerate() {
        let sums = (0..cfg.paths)
            .into_par_iter()
            .map(|i| {
                let pilot = EulerConfig { seed: cfg.seed ^ (0x5eed_0000 + si as u64), ..*cfg };
                let db = euler_increments(&pilot, i);
                let mut x = x0;
                let mut b = 0.0;
                let mut sup: f64 = 0.0;
                let mut acc = vec![0.0; cfg.steps];
                for j in 0..cfg.steps {
                    let (drift, sigma) = coeffs.truncated(regime, j as f64 * dt, b, x);
                    x += drift * dt + sigma * db[j];
                    b += db[j];
                    sup = sup.max((x - x0) * (x - x0));
                    acc[j] = sup;
                }
                acc
            })
            .reduce(
                || vec![0.0; cfg.steps],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        for (j, s) in sums.iter().enumerate() {
            raw = raw.max(s / cfg.paths as f64 / ((j + 1) as f64 * dt));
        }
    }
    let c = 2.0 * raw.max(1e-12);
    FittedConstant { raw, c, delta: 1.0 / (2.0 * c) }
}

/// One row of the switching-time tail bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauBoundRow {
    pub n: usize,
    pub frequency: f64,
    pub standard_error: f64,
    /// `min(1, (2n)^m / 2^n)`.
    pub bound: f64,
    pub vacuous: bool,
    pub passed: bool,
    /// Conditional frequency of `tau_n < T ^ (tau_{n-1} + delta)` given
    /// `tau_{n-1} < T`, with its standard error and sample size.
    pub step_frequency: f64,
    pub step_standard_error: f64,
    pub step_samples: usize,
    pub step_passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauBoundReport {
    pub fitted: FittedConstant,
    pub m: usize,
    pub horizon: f64,
    pub paths: usize,
    pub rows: Vec<TauBoundRow>,
    pub passed: bool,
    /// Seeds (path indices) of paths with at least `max_n` switches.
    pub extreme_paths: Vec<usize>,
}

/// Checks `P(tau_n < T) <= (2n)^m / 2^n` (`m delta < T <= (m + 1) delta`)
/// and the one-step bound `P(tau_{n} < T ^ (tau_{n-1} + delta) | F) <= 1/2`
/// for `n = 1..=max_n`, each with three binomial standard errors.
pub fn verify_tau_bound(coeffs: &LinearCoeffs, cfg: &EulerConfig, pilot: &EulerConfig, max_n: usize) -> Result<TauBoundReport> {
    if cfg.paths < 10_000 {
        log::warn!("tail-bound check with only {} paths", cfg.paths);
    }
    let fitted = fit_moment_constant(coeffs, pilot);
    let m = ((cfg.horizon / fitted.delta).ceil() as usize).saturating_sub(1);
    let paths = simulate_switching_paths(coeffs, cfg)?;
    let total = paths.len() as f64;
    let se = |p: f64, n: f64| if n > 0.0 { (p * (1.0 - p) / n).sqrt() } else { 0.0 };
    let mut rows = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let hits = paths.iter().filter(|p| p.switch_count() >= n).count() as f64;
        let frequency = hits / total;
        let standard_error = se(frequency, total);
        let raw_bound = (2.0 * n as f64).powi(m as i32) / 2f64.powi(n as i32);
        let bound = raw_bound.min(1.0);
        let (mut samples, mut quick) = (0usize, 0usize);
        for p in &paths {
            let prev = if n == 1 { Some(0.0) } else { p.tau(n - 1) };
            if let Some(prev) = prev {
                samples += 1;
                if p.tau(n).is_some_and(|t| t < prev + fitted.delta) {
                    quick += 1;
                }
            }
        }
        let step_frequency = if samples > 0 { quick as f64 / samples as f64 } else { 0.0 };
        let step_standard_error = se(step_frequency, samples as f64);
        rows.push(TauBoundRow {
            n,
            frequency,
            standard_error,
            bound,
            vacuous: raw_bound >= 1.0,
            passed: frequency <= bound + 3.0 * standard_error,
            step_frequency,
            step_standard_error,
            step_samples: samples,
            step_passed: step_frequency <= 0.5 + 3.0 * step_standard_error,
        });
    }
    let extreme_paths = paths.iter().enumerate().filter(|(_, p)| p.switch_count() >= max_n).map(|(i, _)| i).collect();
    let passed = rows.iter().all(|r| r.passed && r.step_passed);
    Ok(TauBoundReport { fitted, m, horizon: cfg.horizon, paths: paths.len(), rows, passed, extreme_paths })
}

/// Pairs `(xi, xi + lambda A_T + mu A_T^perp)` at the final level with
/// `lambda in [0, 1]`, `mu in [-1, 1]` drawn node-wise, and `xi` uniform on
/// `[-1, 1]^2`. The premise `Phi(T, xi) <= Phi(T, xi~)` holds by
/// construction.
pub fn aligned_pairs(weights: &TreeRandomVariable, count: usize, seed: u64) -> Vec<(TreeRandomVariable, TreeRandomVariable)> {
    let unit = Uniform::new_inclusive(-1.0f64, 1.0);
    let half = Uniform::new_inclusive(0.0f64, 1.0);
    (0..count)
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let len = weights.len();
            let mut xi = Vec::with_capacity(len * 2);
            let mut xi2 = Vec::with_capacity(len * 2);
            for n in 0..len {
                let w = weights.node(n);
                let (x1, x2) = (unit.sample(&mut rng), unit.sample(&mut rng));
                let (lambda, mu) = (half.sample(&mut rng), unit.sample(&mut rng));
                xi.extend_from_slice(&[x1, x2]);
                xi2.extend_from_slice(&[x1 + lambda * w[0] - mu * w[1], x2 + lambda * w[1] + mu * w[0]]);
            }
            (TreeRandomVariable::new(weights.level, 2, xi), TreeRandomVariable::new(weights.level, 2, xi2))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearComparisonReport {
    pub pairs: usize,
    pub policies: u64,
    /// Node-wise `Phi(t, Y^u(xi)) > Phi(t, Y^u(xi~)) + tol` for some fixed policy.
    pub policy_violations: usize,
    /// Node-wise violations of the maximized inequality.
    pub max_violations: usize,
    pub worst_slack: f64,
    pub tolerance: f64,
}

/// For every pair and every adapted policy on the whole tree, checks
/// `Phi(t_k, Y^u_k(xi)) <= Phi(t_k, Y^u_k(xi~))` at every node, and the
/// maximized version over policies.
pub fn check_linear_comparison(
    phi: &dyn DynamicUtility,
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    pairs: &[(TreeRandomVariable, TreeRandomVariable)],
    cap: u64,
) -> Result<LinearComparisonReport> {
    probe_linearity(problem, tree)?;
    let engine = Engine::new(problem, tree)?;
    let seg = Segment::full(tree, 0, tree.steps())?;
    let class = problem.class();
    let count = seg.policy_count(class, problem.controls().len());
    if count > cap as f64 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let coords = seg.coordinates(class);
    let base = problem.controls().len() as u32;
    let mut report = LinearComparisonReport {
        pairs: pairs.len(),
        policies: count as u64,
        policy_violations: 0,
        max_violations: 0,
        worst_slack: f64::NEG_INFINITY,
        tolerance: LINEAR_COMPARISON_TOL,
    };
    let n = tree.steps();
    for (eta, eta2) in pairs {
        let (t1, t2) = (seg.gather_terminal(eta)?, seg.gather_terminal(eta2)?);
        let mut best1: Vec<Vec<f64>> = (0..=n).map(|k| vec![f64::NEG_INFINITY; tree.level_len(k)]).collect();
        let mut best2 = best1.clone();
        let mut digits = vec![0u32; coords];
        loop {
            let policy = Policy::from_digits(&seg, class, &digits)?;
            let (y1, _) = engine.solve(&seg, &policy, &t1)?;
            let (y2, _) = engine.solve(&seg, &policy, &t2)?;
            for k in 0..=n {
                for (j, &node) in seg.nodes(k).iter().enumerate() {
                    let v1 = phi.value(k, node, &y1[k][j * 2..j * 2 + 2]);
                    let v2 = phi.value(k, node, &y2[k][j * 2..j * 2 + 2]);
                    report.worst_slack = report.worst_slack.max(v1 - v2);
                    if v1 > v2 + LINEAR_COMPARISON_TOL {
                        report.policy_violations += 1;
                    }
                    best1[k][node] = best1[k][node].max(v1);
                    best2[k][node] = best2[k][node].max(v2);
                }
            }
            if !advance(&mut digits, base) {
                break;
            }
        }
        for k in 0..=n {
            report.max_violations +=
                best1[k].iter().zip(&best2[k]).filter(|(a, b)| **a > **b + LINEAR_COMPARISON_TOL).count();
        }
    }
    Ok(report)
}

fn advance(digits: &mut [u32], base: u32) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Checks on random probes that the driver is affine in `(y, z)` for each
/// control; anything else is a structure error.
fn probe_linearity(problem: &BsdeProblem, tree: &ScenarioTree) -> Result<()> {
    if problem.value_dim() != 2 || tree.dim() != 1 {
        return Err(Error::Dimension("the linear construction covers d' = 2 with one noise dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e_a11e);
    let unit = Uniform::new_inclusive(-2.0f64, 2.0);
    let mut buf = Vec::new();
    for _ in 0..64 {
        let k = rng.gen_range_usize(tree.steps());
        let node = rng.gen_range_usize(tree.level_len(k));
        let ctx = tree.node_ctx(k, node, &mut buf);
        let u = problem.controls().point(rng.gen_range_usize(problem.controls().len())).to_vec();
        let mut draw = || -> [f64; 4] { [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)] };
        let (p, q) = (draw(), draw());
        let s = unit.sample(&mut rng);
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| s * a + (1.0 - s) * b).collect();
        let eval = |v: &[f64]| {
            let mut out = [0.0; 2];
            problem.generator(&ctx, &v[..2], &v[2..], &u, &mut out);
            out
        };
        let (fp, fq, fm) = (eval(&p), eval(&q), eval(&mix));
        for i in 0..2 {
            let affine = s * fp[i] + (1.0 - s) * fq[i];
            if (fm[i] - affine).abs() > 1e-9 * (1.0 + affine.abs()) {
                return Err(Error::Structure(format!("driver component {i} is not affine in (y, z)")));
            }
        }
    }
    Ok(())
}

trait RangeExt {
    fn gen_range_usize(&mut self, n: usize) -> usize;
}

impl RangeExt for ChaCha8Rng {
    fn gen_range_usize(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.gen_range(0..n.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dynamics_freeze_the_ratio() {
        let c = LinearCoeffs::constant([[0.0; 2]; 2], [[0.0; 2]; 2], [1.0, 1.0], [0.3, 1.0]);
        let cfg = EulerConfig { horizon: 1.0, steps: 100, paths: 4, seed: 1 };
        for p in simulate_switching_paths(&c, &cfg).unwrap() {
            assert_eq!(p.switch_count(), 0);
            assert!(p.ratio.iter().all(|&r| r == 0.3));
            assert!(p.a1.iter().all(|&a| a == 0.3) && p.a2.iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn symmetric_beta_has_no_diffusion() {
        let c = LinearCoeffs::constant([[0.0; 2]; 2], [[0.7, 0.0], [0.0, 0.7]], [1.0, 1.0], [0.3, 1.0]);
        for x in [-2.0, -0.5, 0.0, 1.3] {
            assert_eq!(c.ratio_coefficients(1, 0.0, 0.0, x), (0.0, 0.0));
        }
    }

    #[test]
    fn unit_drift_reaches_two_at_time_two() {
        let c = LinearCoeffs::constant([[0.0, 0.0], [1.0, 0.0]], [[0.0; 2]; 2], [1.0, 1.0], [0.0, 1.0]);
        let cfg = EulerConfig { horizon: 3.0, steps: 3000, paths: 1, seed: 0 };
        let p = &simulate_switching_paths(&c, &cfg).unwrap()[0];
        assert!((p.ratio[1000] - 1.0).abs() < 1e-12);
        assert!((p.tau(1).unwrap() - 2.0).abs() <= 1e-3 + 1e-12);
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let c = LinearCoeffs::constant([[0.0; 2]; 2], [[0.0; 2]; 2], [1.0, 1.0], [0.0, 0.0]);
        assert!(matches!(c.validate(1.0), Err(Error::Precondition(_))));
    }
}
