//! Worked problems with closed-form answers.
//!
//! Each instance builds the corresponding [`BsdeProblem`] and exposes its
//! analytic oracles: the static optimum, the optimal control and, where one
//! exists, the time-dependent parameter that restores time consistency.
//! Continuous-time formulas are given alongside their exact tree analogues
//! (compounding `(1 + dt)^k` in place of `e^t`) where the two differ.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeProblem, ControlClass, ControlSet, Engine, SearchOptions, Segment};
use crate::duality::MarkovProblem;
use crate::error::{Error, Result};
use crate::lattice::{ScenarioTree, TreeMode};

/// Stable identifiers of the shipped benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    MeanVariance,
    OneDim,
    PrincipalAgent,
    Deterministic,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 4] = [
        BenchmarkId::MeanVariance,
        BenchmarkId::OneDim,
        BenchmarkId::PrincipalAgent,
        BenchmarkId::Deterministic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchmarkId::MeanVariance => "mean_variance",
            BenchmarkId::OneDim => "one_dim",
            BenchmarkId::PrincipalAgent => "principal_agent",
            BenchmarkId::Deterministic => "deterministic",
        }
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_variance" => Ok(BenchmarkId::MeanVariance),
            "one_dim" => Ok(BenchmarkId::OneDim),
            "principal_agent" => Ok(BenchmarkId::PrincipalAgent),
            "deterministic" => Ok(BenchmarkId::Deterministic),
            "distortion" | "probability_distortion" => Err(Error::OutOfScope(
                "probability-distortion utilities are nonlinear in the law of the terminal \
                 value and cannot be written as a utility of a finite-dimensional BSDE value"
                    .into(),
            )),
            other => Err(Error::InvalidArgument(format!(
                "unknown benchmark '{other}'; expected one of mean_variance, one_dim, \
                 principal_agent, deterministic"
            ))),
        }
    }
}

/// Two-dimensional deterministic problem `f = (u - y_2, u)`, `xi = 0`,
/// `phi(y) = y_1`, deterministic controls in `{0, 1}`, horizon `T > 1`.
///
/// `Y^1_t = int_t^T (1 + t - s) u_s ds`, so the time-`t` optimum switches the
/// control on over `[t, (1 + t) ^ T]` and the time-0 optimum is `1_{[0,1)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicExample {
    pub horizon: f64,
}

impl DeterministicExample {
    pub fn new(horizon: f64) -> Result<Self> {
        if !(horizon > 1.0 && horizon.is_finite()) {
            return Err(Error::Precondition(format!(
                "the deterministic example needs a horizon above 1, got {horizon}"
            )));
        }
        Ok(Self { horizon })
    }

    pub fn controls() -> ControlSet {
        ControlSet::scalar(&[0.0, 1.0]).expect("static control set")
    }

    pub fn problem(&self) -> BsdeProblem {
        BsdeProblem::new(
            2,
            1,
            Self::controls(),
            1.0,
            |_, y, _, u, out| {
                out[0] = u[0] - y[1];
                out[1] = u[0];
            },
            |_, out| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            |y| y[0],
        )
        .named("deterministic")
        .with_class(ControlClass::Deterministic)
    }

    /// The same problem for the HJB grid solver.
    pub fn markov(&self) -> MarkovProblem {
        MarkovProblem::new(
            2,
            Self::controls(),
            1.0,
            |_, _, y, _, u, out| {
                out[0] = u[0] - y[1];
                out[1] = u[0];
            },
            |_, out| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            |y| y[0],
        )
        .x_independent()
        .with_class(ControlClass::Deterministic)
    }

    /// Continuous-time value `V_t = a - a^2 / 2` with `a = min(1, T - t)`.
    pub fn value(&self, t: f64) -> f64 {
        let a = (self.horizon - t).min(1.0).max(0.0);
        a - 0.5 * a * a
    }

    /// `Y^1_k` of the explicit scheme: `sum_{i >= k} u_i dt (1 - (i - k) dt)`.
    pub fn tree_y1(&self, steps: usize, k: usize, on: &[bool]) -> f64 {
        let dt = self.horizon / steps as f64;
        (k..steps)
            .filter(|&i| on[i])
            .map(|i| dt * (1.0 - (i - k) as f64 * dt))
            .sum()
    }

    /// Optimal deterministic control of the level-`k` problem on a grid of
    /// `steps` levels: on exactly where the weight `1 - (i - k) dt` is
    /// positive. Entries before `k` are `false`.
    pub fn tree_optimal_control(&self, steps: usize, k: usize) -> Vec<bool> {
        let dt = self.horizon / steps as f64;
        (0..steps).map(|i| i >= k && 1.0 - (i - k) as f64 * dt > 0.0).collect()
    }

    /// Exact optimum of the level-`k` problem on the tree.
    pub fn tree_value(&self, steps: usize, k: usize) -> f64 {
        self.tree_y1(steps, k, &self.tree_optimal_control(steps, k))
    }

    /// Lower and upper `y_1` bounds of the continuum reachable set at time
    /// `t` for `y_2 = m`, `m in [0, T - t]`.
    pub fn reachable_bounds(&self, t: f64, m: f64) -> (f64, f64) {
        let s = self.horizon - t;
        (m - s * m + 0.5 * m * m, m - 0.5 * m * m)
    }

    /// Whether `y` lies in the continuum reachable set at time `t`.
    pub fn reachable_contains(&self, t: f64, y: &[f64], tol: f64) -> bool {
        let s = self.horizon - t;
        if y[1] < -tol || y[1] > s + tol {
            return false;
        }
        let m = y[1].clamp(0.0, s);
        let (lo, hi) = self.reachable_bounds(t, m);
        y[0] >= lo - tol && y[0] <= hi + tol
    }

    /// Points of the continuum reachable set at time `t`, spaced about
    /// `spacing` apart (boundary included).
    pub fn reachable_sample(&self, t: f64, spacing: f64) -> Vec<Vec<f64>> {
        let s = self.horizon - t;
        let rows = (s / spacing).ceil() as usize;
        let mut out = Vec::new();
        for r in 0..=rows {
            let m = s * r as f64 / rows as f64;
            let (lo, hi) = self.reachable_bounds(t, m);
            let cols = ((hi - lo) / spacing).ceil().max(1.0) as usize;
            for c in 0..=cols {
                out.push(vec![lo + (hi - lo) * c as f64 / cols as f64, m]);
            }
        }
        out
    }
}

/// One-dimensional problem `f = u`, `xi = B_T`, `phi(y) = -|c + y|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneDimExample {
    pub c: f64,
    pub horizon: f64,
}

impl OneDimExample {
    pub fn new(c: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid one-dimensional example c = {c}, T = {horizon}")));
        }
        Ok(Self { c, horizon })
    }

    pub fn default_controls() -> ControlSet {
        ControlSet::scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]).expect("static control set")
    }

    pub fn problem(&self, controls: ControlSet) -> BsdeProblem {
        let c = self.c;
        BsdeProblem::new(
            1,
            1,
            controls,
            0.0,
            |_, _, _, u, out| out[0] = u[0],
            |ctx, out| out[0] = ctx.brownian[0],
            move |y| -(c + y[0]).abs(),
        )
        .named("one_dim")
    }

    /// Constant optimal control of the time-0 problem, when `|c| >= T`.
    pub fn static_control(&self) -> Option<f64> {
        if self.c >= self.horizon {
            Some(-1.0)
        } else if self.c <= -self.horizon {
            Some(1.0)
        } else {
            None
        }
    }

    /// Static value: `-|c - T|` for `c >= T`, `-|c + T|` for `c <= -T`.
    pub fn static_value(&self) -> Option<f64> {
        self.static_control().map(|u| -(self.c + u * self.horizon).abs())
    }

    /// Restoring shift `c_t = c - t - B_t` (case `c >= T`).
    pub fn restored_shift(&self, t: f64, b: f64) -> f64 {
        self.c - t - b
    }

    /// Nodes where the static utility makes `+1` optimal at time `t` although
    /// the time-0 optimum is `-1`: `B_t <= t - T - c` (`= t - 2T` for `c = T`).
    pub fn in_inconsistency_region(&self, t: f64, b: f64) -> bool {
        self.c >= self.horizon && b <= t - self.horizon - self.c + 1e-12
    }
}

/// Mean-variance investment: `dX = u dt + u dB`, `X_0 = x0`, maximize
/// `E X_T - Var(X_T) / (2c)`, written as the utility
/// `phi(y) = y_1 + y_1^2 / (2c) - y_2 / (2c)` of `Y = (E_t X_T, E_t X_T^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanVariance {
    pub x0: f64,
    pub c: f64,
    pub horizon: f64,
}

impl MeanVariance {
    pub fn new(x0: f64, c: f64, horizon: f64) -> Result<Self> {
        if !(c > 0.0 && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("mean-variance needs c > 0 and T > 0, got c = {c}, T = {horizon}")));
        }
        Ok(Self { x0, c, horizon })
    }

    pub fn utility(c: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + Clone {
        move |y: &[f64]| y[0] + y[0] * y[0] / (2.0 * c) - y[1] / (2.0 * c)
    }

    /// Continuous-time optimal feedback `u = x0 - x + c e^T` as `(a, b)` in
    /// `u = a + b x`.
    pub fn analytic_feedback(&self) -> (f64, f64) {
        (self.x0 + self.c * self.horizon.exp(), -1.0)
    }

    /// Continuous-time restoring parameter `c_t = c e^t - e^{t-T} (X_t - x0)`.
    pub fn restored_c(&self, t: f64, x: f64) -> f64 {
        self.c * t.exp() - (t - self.horizon).exp() * (x - self.x0)
    }

    /// Exact optimum on a tree with `steps` levels:
    /// `u = (gamma - x) / (1 + dt)` with `gamma = x0 + c (1 + dt)^n`.
    pub fn tree_feedback(&self, steps: usize) -> (f64, f64) {
        let dt = self.horizon / steps as f64;
        let gamma = self.x0 + self.c * (1.0 + dt).powi(steps as i32);
        (gamma / (1.0 + dt), -1.0 / (1.0 + dt))
    }

    /// Tree analogue of the restoring parameter:
    /// `c_k = c (1 + dt)^k - (1 + dt)^{k - n} (X_k - x0)`.
    pub fn tree_restored_c(&self, steps: usize, k: usize, x: f64) -> f64 {
        let g = 1.0 + self.horizon / steps as f64;
        self.c * g.powi(k as i32) - g.powi(k as i32 - steps as i32) * (x - self.x0)
    }

    /// Wealth along the path to `(k, node)` under the feedback `(a, b)`.
    pub fn wealth(&self, tree: &ScenarioTree, k: usize, node: usize, feedback: (f64, f64)) -> Result<f64> {
        let path = tree.path(k, node)?;
        let dt = tree.dt();
        let mut x = self.x0;
        for j in 0..k {
            let db = path.point(j + 1)[0] - path.point(j)[0];
            x += (feedback.0 + feedback.1 * x) * (dt + db);
        }
        Ok(x)
    }

    /// `(E_k X_T, E_k X_T^2)` on the cone of `(k, node)` from wealth `x`
    /// under the feedback `(a, b)`.
    pub fn moments(&self, tree: &ScenarioTree, k: usize, node: usize, x: f64, feedback: (f64, f64)) -> Result<[f64; 2]> {
        if tree.mode() != TreeMode::Path {
            return Err(Error::PathModeRequired);
        }
        tree.check_node(k, node)?;
        let dt = tree.dt();
        let sq = tree.sqrt_dt();
        let mut level = vec![x];
        for _ in k..tree.steps() {
            let mut next = Vec::with_capacity(level.len() * 2);
            for &w in &level {
                let u = feedback.0 + feedback.1 * w;
                next.push(w + u * (dt - sq));
                next.push(w + u * (dt + sq));
            }
            level = next;
        }
        // f = 0: Y_k = E_k[xi]; average pairwise to match the tree scheme.
        let mut m1: Vec<f64> = level.clone();
        let mut m2: Vec<f64> = level.iter().map(|w| w * w).collect();
        while m1.len() > 1 {
            m1 = m1.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
            m2 = m2.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        }
        Ok([m1[0], m2[0]])
    }

    /// Mean-variance objective with risk parameter `c` on the cone.
    pub fn objective(&self, tree: &ScenarioTree, k: usize, node: usize, x: f64, feedback: (f64, f64), c: f64) -> Result<f64> {
        let y = self.moments(tree, k, node, x, feedback)?;
        Ok(Self::utility(c)(&y))
    }

    /// The BSDE formulation for a fixed feedback: `f = 0` and the
    /// path-dependent terminal value `(X_T, X_T^2)`.
    pub fn problem(&self, feedback: (f64, f64)) -> BsdeProblem {
        let (x0, c) = (self.x0, self.c);
        BsdeProblem::new(
            2,
            1,
            ControlSet::scalar(&[0.0]).expect("static control set"),
            0.0,
            |_, _, _, _, out| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            move |ctx, out| {
                let path = ctx.path().expect("mean-variance needs a path-mode tree");
                let mut x = x0;
                for j in 0..path.level() {
                    let db = path.point(j + 1)[0] - path.point(j)[0];
                    x += (feedback.0 + feedback.1 * x) * (path.dt() + db);
                }
                out[0] = x;
                out[1] = x * x;
            },
            Self::utility(c),
        )
        .named("mean_variance")
        .with_path_dependence(true)
    }
}

/// Principal-agent contracting with exponential utilities
/// `U_A(x) = -exp(-gamma_A x)`, `U_P(x) = -exp(-gamma_P x)`, participation
/// level `R < 0` and constant effort `u`.
///
/// The agent's certainty equivalent evolves forward as
/// `Y^A_s = U_A^{-1}(R) + (gamma_A - 1)/2 int u^2 + int u dB`, and the
/// principal's value solves `Y^P_s = U_P(B_T - Y^A_T) + int u Z^P - int Z^P dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAgent {
    pub gamma_a: f64,
    pub gamma_p: f64,
    pub participation: f64,
    pub horizon: f64,
}

impl PrincipalAgent {
    pub fn new(gamma_a: f64, gamma_p: f64, participation: f64, horizon: f64) -> Result<Self> {
        if !(gamma_a > 0.0 && gamma_p > 0.0 && participation < 0.0 && horizon > 0.0) {
            return Err(Error::InvalidArgument(
                "principal-agent needs positive risk aversions, R < 0 and T > 0".into(),
            ));
        }
        Ok(Self { gamma_a, gamma_p, participation, horizon })
    }

    /// `u* = (1 + gamma_P) / (1 + gamma_A + gamma_P)`.
    pub fn optimal_effort(&self) -> f64 {
        (1.0 + self.gamma_p) / (1.0 + self.gamma_a + self.gamma_p)
    }

    /// `U_A^{-1}(R) = -ln(-R) / gamma_A`.
    pub fn certainty_equivalent(&self, r: f64) -> f64 {
        -(-r).ln() / self.gamma_a
    }

    /// Agent value at time `t` under the time-0 optimal contract, and the
    /// restoring participation level
    /// `R_t = R exp(-gamma_A [u* B_t + (gamma_A - 1)/2 u*^2 t])`.
    pub fn restored_participation(&self, t: f64, b: f64) -> f64 {
        let u = self.optimal_effort();
        self.participation * (-self.gamma_a * (u * b + 0.5 * (self.gamma_a - 1.0) * u * u * t)).exp()
    }

    /// Contract `C_T = U_A^{-1}(R_t) + u (B_T - B_t) + (gamma_A - 1)/2 u^2 (T - t)`
    /// offered at time `t` with participation `r`.
    pub fn contract(&self, r: f64, u: f64, t: f64, b_t: f64, b_end: f64) -> f64 {
        self.certainty_equivalent(r) + u * (b_end - b_t) + 0.5 * (self.gamma_a - 1.0) * u * u * (self.horizon - t)
    }

    /// The principal's BSDE for effort `u` offered at level `k` with
    /// participation `r` (terminal value as a function of `B_T - B_{t_k}`).
    pub fn problem(&self, u: f64, r: f64, t: f64, b_t: f64) -> BsdeProblem {
        let this = *self;
        let gp = self.gamma_p;
        BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[u]).expect("static control set"),
            u.abs(),
            |_, _, z, u, out| out[0] = u[0] * z[0],
            move |ctx, out| {
                let b = ctx.brownian[0];
                out[0] = -(-gp * (b - this.contract(r, u, t, b_t, b))).exp();
            },
            |y| y[0],
        )
        .named("principal_agent")
    }

    /// Principal's value `Y^P_k(node)` for constant effort `u` and
    /// participation `r` offered at `(k, node)`.
    pub fn value(&self, tree: &ScenarioTree, k: usize, node: usize, u: f64, r: f64) -> Result<f64> {
        let t = tree.time(k);
        let b_t = tree.brownian(k, node)[0];
        let problem = self.problem(u, r, t, b_t);
        let engine = Engine::new(&problem, tree)?;
        let seg = Segment::cone(tree, k, node, tree.steps())?;
        let terminal = engine.terminal_values(&seg)?;
        let opt = engine.optimize(&seg, &terminal, &|y| y[0], &SearchOptions::default())?;
        Ok(opt.value)
    }
}

/// Result of a time-consistency sweep over tree nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub benchmark: BenchmarkId,
    pub restored: bool,
    pub nodes_checked: usize,
    /// Nodes where the time-t argmax differs from the time-0 optimum.
    pub violations: usize,
    /// Largest value margin `V_t(argmax) - V_t(time-0 optimum)` seen.
    pub max_margin: f64,
}

/// Compares, at every node, the argmax of the time-`k` mean-variance
/// problem over a `(2r + 1)^2` feedback grid centred on the tree optimum
/// with the time-0 optimum. `restored` uses the tree restoring parameter,
/// otherwise the static `c`.
pub fn mean_variance_consistency(mv: &MeanVariance, tree: &ScenarioTree, radius: i32, spacing: (f64, f64), restored: bool) -> Result<ConsistencyReport> {
    let star = mv.tree_feedback(tree.steps());
    let mut nodes_checked = 0;
    let mut violations = 0;
    let mut max_margin: f64 = 0.0;
    for k in 0..tree.steps() {
        for node in 0..tree.level_len(k) {
            let x = mv.wealth(tree, k, node, star)?;
            let c = if restored { mv.tree_restored_c(tree.steps(), k, x) } else { mv.c };
            if c <= 0.0 {
                continue;
            }
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in -radius..=radius {
                for j in -radius..=radius {
                    let fb = (star.0 + i as f64 * spacing.0, star.1 + j as f64 * spacing.1);
                    let v = mv.objective(tree, k, node, x, fb, c)?;
                    if v > best.0 {
                        best = (v, i, j);
                    }
                }
            }
            let at_star = mv.objective(tree, k, node, x, star, c)?;
            nodes_checked += 1;
            if (best.1, best.2) != (0, 0) {
                violations += 1;
                max_margin = max_margin.max(best.0 - at_star);
            }
        }
    }
    Ok(ConsistencyReport { benchmark: BenchmarkId::MeanVariance, restored, nodes_checked, violations, max_margin })
}

/// At every node whose cone is enumerable, checks whether the time-`k`
/// argmax is the constant `-1` policy. `restored` uses
/// `Phi(t, y) = -|c_t + y|`, otherwise the static utility.
pub fn one_dim_consistency(ex: &OneDimExample, tree: &ScenarioTree, controls: &ControlSet, cap: u64, restored: bool) -> Result<ConsistencyReport> {
    let minus = (0..controls.len())
        .find(|&i| controls.point(i)[0] == -1.0)
        .ok_or_else(|| Error::InvalidArgument("control set must contain -1".into()))?;
    let problem = ex.problem(controls.clone());
    let engine = Engine::new(&problem, tree)?;
    let mut nodes_checked = 0;
    let mut violations = 0;
    let mut max_margin: f64 = 0.0;
    for k in 0..tree.steps() {
        for node in 0..tree.level_len(k) {
            let seg = Segment::cone(tree, k, node, tree.steps())?;
            if seg.policy_count(problem.class(), controls.len()) > cap as f64 {
                continue;
            }
            let shift = if restored { ex.restored_shift(tree.time(k), tree.brownian(k, node)[0]) } else { ex.c };
            let objective = move |y: &[f64]| -(shift + y[0]).abs();
            let terminal = engine.terminal_values(&seg)?;
            let opt = engine.optimize(&seg, &terminal, &objective, &SearchOptions::exact_only(cap))?;
            let reference = crate::bsde::Policy::constant(&seg, problem.class(), minus as u32);
            let (ys, _) = engine.solve(&seg, &reference, &terminal)?;
            nodes_checked += 1;
            if opt.policy != reference {
                violations += 1;
                max_margin = max_margin.max(opt.value - objective(&ys[0]));
            }
        }
    }
    Ok(ConsistencyReport { benchmark: BenchmarkId::OneDim, restored, nodes_checked, violations, max_margin })
}

/// At every node, re-optimizes effort over `u* + i * spacing`
/// (`|i| <= radius`) and compares the resulting contract with the time-0
/// optimal contract on all terminal nodes of the cone. `restored` offers the
/// participation level `R_t`, otherwise `R`.
pub fn principal_agent_consistency(pa: &PrincipalAgent, tree: &ScenarioTree, radius: i32, spacing: f64, restored: bool) -> Result<ConsistencyReport> {
    let u_star = pa.optimal_effort();
    let mut nodes_checked = 0;
    let mut violations = 0;
    let mut max_margin: f64 = 0.0;
    let n = tree.steps();
    for k in 0..n {
        for node in 0..tree.level_len(k) {
            let t = tree.time(k);
            let b_t = tree.brownian(k, node)[0];
            let r = if restored { pa.restored_participation(t, b_t) } else { pa.participation };
            let mut best = (f64::NEG_INFINITY, 0.0);
            for i in -radius..=radius {
                let u = u_star + i as f64 * spacing;
                let v = pa.value(tree, k, node, u, r)?;
                if v > best.0 {
                    best = (v, u);
                }
            }
            let seg = Segment::cone(tree, k, node, n)?;
            let mut differs = false;
            for &leaf in seg.nodes(n - k) {
                let b_end = tree.brownian(n, leaf)[0];
                let offered = pa.contract(r, best.1, t, b_t, b_end);
                let committed = pa.contract(pa.participation, u_star, 0.0, 0.0, b_end);
                differs |= (offered - committed).abs() > 1e-9 * (1.0 + committed.abs());
            }
            nodes_checked += 1;
            if differs {
                violations += 1;
                let committed_value = pa.value(tree, k, node, u_star, r)?;
                max_margin = max_margin.max(best.0 - committed_value);
            }
        }
    }
    Ok(ConsistencyReport { benchmark: BenchmarkId::PrincipalAgent, restored, nodes_checked, violations, max_margin })
}

/// Time-`t_k` re-optimization of the deterministic example against the
/// restriction of the time-0 optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicWitnessRow {
    pub level: usize,
    pub time: f64,
    /// Levels where the re-optimized control differs from the time-0 one.
    pub disagreement: Vec<usize>,
    /// Levels `i` with `t_i` in `[1, 1 + t_k)`, where the closed form predicts
    /// disagreement.
    pub expected: Vec<usize>,
    /// `V_k(re-optimized) - V_k(time-0 optimum restricted)`.
    pub margin: f64,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicWitness {
    pub steps: usize,
    pub rows: Vec<DeterministicWitnessRow>,
    pub passed: bool,
}

/// Re-optimizes the deterministic example at every level `k >= 1` of a
/// `steps`-level grid by full enumeration and compares the argmax with the
/// time-0 optimum. Levels whose weight `1 - (i - k) dt` vanishes are ties and
/// excluded from the comparison.
pub fn deterministic_inconsistency(ex: &DeterministicExample, steps: usize, cap: u64) -> Result<DeterministicWitness> {
    let tree = ScenarioTree::new(crate::lattice::TimeGrid::new(ex.horizon, steps)?, 1, TreeMode::Recombining)?;
    let problem = ex.problem();
    let engine = Engine::new(&problem, &tree)?;
    let dt = tree.dt();
    let is_tie = |i: usize, k: usize| (1.0 - (i - k) as f64 * dt).abs() < 1e-12;
    let u0 = ex.tree_optimal_control(steps, 0);
    let mut rows = Vec::new();
    for k in 1..steps {
        let seg = Segment::cone(&tree, k, 0, steps)?;
        let terminal = engine.terminal_values(&seg)?;
        let opt = engine.optimize(&seg, &terminal, &|y| y[0], &SearchOptions::exact_only(cap))?;
        let chosen = opt.policy.digits();
        let restricted: Vec<u32> = u0[k..].iter().map(|&on| on as u32).collect();
        let reference = crate::bsde::Policy::from_digits(&seg, problem.class(), &restricted)?;
        let (ys, _) = engine.solve(&seg, &reference, &terminal)?;
        let predicted = ex.tree_optimal_control(steps, k);
        let disagreement: Vec<usize> =
            (k..steps).filter(|&i| !is_tie(i, k) && !is_tie(i, 0) && chosen[i - k] != restricted[i - k]).collect();
        let expected: Vec<usize> = (k..steps).filter(|&i| !is_tie(i, k) && !is_tie(i, 0) && predicted[i] != u0[i]).collect();
        let time_expected: Vec<usize> = (k..steps)
            .filter(|&i| !is_tie(i, k) && !is_tie(i, 0) && tree.time(i) >= 1.0 - 1e-12 && tree.time(i) < 1.0 + tree.time(k) - 1e-12)
            .collect();
        let margin = opt.value - ys[0][0];
        let matches = disagreement == expected && expected == time_expected && (expected.is_empty() || margin > 0.0);
        rows.push(DeterministicWitnessRow { level: k, time: tree.time(k), disagreement, expected, margin, matches });
    }
    let passed = rows.iter().all(|r| r.matches) && rows.iter().any(|r| !r.expected.is_empty());
    Ok(DeterministicWitness { steps, rows, passed })
}

/// Re-optimization of the one-dimensional example with the static utility
/// inside the region `B_t <= t - T - c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneDimWitness {
    /// The time-0 optimum is the constant `-1` control.
    pub static_minus_one: bool,
    pub region_nodes: usize,
    /// Region nodes skipped because their cone exceeds the cap.
    pub skipped: usize,
    /// Region nodes whose re-optimized policy is `+1` everywhere.
    pub plus_one_nodes: usize,
    pub passed: bool,
}

/// At every node of the inconsistency region with an enumerable cone,
/// checks that the re-optimized control is `+1` at every cone node, and that
/// the time-0 optimum at the root is the constant `-1` control (when the
/// root is enumerable; otherwise the closed form is used).
pub fn one_dim_inconsistency(ex: &OneDimExample, tree: &ScenarioTree, controls: &ControlSet, cap: u64) -> Result<OneDimWitness> {
    let find = |v: f64| {
        (0..controls.len())
            .find(|&i| controls.point(i)[0] == v)
            .ok_or_else(|| Error::InvalidArgument(format!("control set must contain {v}")))
    };
    let (minus, plus) = (find(-1.0)? as u32, find(1.0)? as u32);
    let problem = ex.problem(controls.clone());
    let engine = Engine::new(&problem, tree)?;
    let objective = |y: &[f64]| problem.utility(y);
    let root = Segment::cone(tree, 0, 0, tree.steps())?;
    let static_minus_one = if root.policy_count(problem.class(), controls.len()) <= cap as f64 {
        let terminal = engine.terminal_values(&root)?;
        let opt = engine.optimize(&root, &terminal, &objective, &SearchOptions::exact_only(cap))?;
        opt.policy.digits().iter().all(|&d| d == minus)
    } else {
        ex.static_control() == Some(-1.0)
    };
    let (mut region_nodes, mut skipped, mut plus_one_nodes) = (0, 0, 0);
    for k in 1..tree.steps() {
        for node in 0..tree.level_len(k) {
            if !ex.in_inconsistency_region(tree.time(k), tree.brownian(k, node)[0]) {
                continue;
            }
            region_nodes += 1;
            let seg = Segment::cone(tree, k, node, tree.steps())?;
            if seg.policy_count(problem.class(), controls.len()) > cap as f64 {
                skipped += 1;
                continue;
            }
            let terminal = engine.terminal_values(&seg)?;
            let opt = engine.optimize(&seg, &terminal, &objective, &SearchOptions::exact_only(cap))?;
            if opt.policy.digits().iter().all(|&d| d == plus) {
                plus_one_nodes += 1;
            }
        }
    }
    let checked = region_nodes - skipped;
    Ok(OneDimWitness {
        static_minus_one,
        region_nodes,
        skipped,
        plus_one_nodes,
        passed: static_minus_one && checked > 0 && plus_one_nodes == checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortion_is_out_of_scope() {
        assert!(matches!("distortion".parse::<BenchmarkId>(), Err(Error::OutOfScope(_))));
        for id in BenchmarkId::ALL {
            assert_eq!(id.as_str().parse::<BenchmarkId>().unwrap(), id);
        }
    }

    #[test]
    fn deterministic_tree_value_is_half_plus_half_step() {
        let ex = DeterministicExample::new(2.0).unwrap();
        assert!((ex.tree_value(64, 0) - (0.5 + 1.0 / 64.0)).abs() < 1e-14);
        assert!((ex.value(0.0) - 0.5).abs() < 1e-15);
        assert!((ex.value(1.5) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn restored_c_matches_tree_analogue_in_the_limit() {
        let mv = MeanVariance::new(1.0, 0.5, 1.0).unwrap();
        let (k, n) = (3000, 6000);
        let t = k as f64 / n as f64;
        assert!((mv.tree_restored_c(n, k, 1.7) - mv.restored_c(t, 1.7)).abs() < 1e-3);
    }
}
