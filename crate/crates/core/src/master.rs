//! Forward value `Psi(t, eta) = max_u phi(Y^u_0(t, eta))` over tree random
//! variables, its forward dynamic programming principle, and the first-order
//! master equation it satisfies in `(t, eta)`.
//!
//! Path functionals enter through [`CylinderFunctional`]: a process
//! `v(s, omega)` together with its horizontal and vertical derivatives. The
//! variable `eta` at level `k` is `v(t_k, .)`, and its stopped version at the
//! previous level is `v(t_{k-1}, .)`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeProblem, Engine, Segment, SearchOptions};
use crate::error::{Error, Result};
use crate::lattice::{NodeCtx, ScenarioTree, TreeRandomVariable};

/// `Psi(t_k, eta)` with the enumeration settings used to compute it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardEval {
    pub value: f64,
    pub exact: bool,
    pub evaluated: u64,
}

/// Forward value of a problem on a tree.
pub struct ForwardValue<'a> {
    problem: &'a BsdeProblem,
    tree: &'a ScenarioTree,
    engine: Engine<'a>,
    options: SearchOptions,
}

impl<'a> ForwardValue<'a> {
    pub fn new(problem: &'a BsdeProblem, tree: &'a ScenarioTree, options: SearchOptions) -> Result<Self> {
        Ok(Self { problem, tree, engine: Engine::new(problem, tree)?, options })
    }

    pub fn problem(&self) -> &'a BsdeProblem {
        self.problem
    }

    pub fn tree(&self) -> &'a ScenarioTree {
        self.tree
    }

    /// `max_u phi(Y^u_0(t_k, eta))` over policies on `[0, t_k]`.
    pub fn eval(&self, eta: &TreeRandomVariable) -> Result<ForwardEval> {
        self.check(eta)?;
        if eta.level == 0 {
            return Ok(ForwardEval { value: self.problem.utility(eta.node(0)), exact: true, evaluated: 1 });
        }
        let seg = Segment::full(self.tree, 0, eta.level)?;
        let terminal = seg.gather_terminal(eta)?;
        let utility = self.problem.utility_fn();
        let opt = self.engine.optimize(&seg, &terminal, &|y| utility(y), &self.options)?;
        Ok(ForwardEval { value: opt.value, exact: opt.exact, evaluated: opt.evaluated })
    }

    pub fn value(&self, eta: &TreeRandomVariable) -> Result<f64> {
        Ok(self.eval(eta)?.value)
    }

    fn check(&self, eta: &TreeRandomVariable) -> Result<()> {
        self.tree.check_level(eta.level)?;
        if eta.dim != self.problem.value_dim() || eta.len() != self.tree.level_len(eta.level) {
            return Err(Error::Dimension(format!(
                "eta must hold {} values of dimension {} at level {}",
                self.tree.level_len(eta.level),
                self.problem.value_dim(),
                eta.level
            )));
        }
        Ok(())
    }
}

/// `Psi(t_k, eta)` with default enumeration settings.
pub fn forward_value(problem: &BsdeProblem, tree: &ScenarioTree, eta: &TreeRandomVariable) -> Result<f64> {
    ForwardValue::new(problem, tree, SearchOptions::default())?.value(eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardDppReport {
    pub t1: usize,
    pub t2: usize,
    pub direct: f64,
    pub split: f64,
    /// `|direct - split|`; one-sided (`direct >= split`) under the fallback.
    pub residual: f64,
    pub exact: bool,
}

/// `|Psi(t2, eta) - max_{u on [t1, t2)} Psi(t1, Y^u_{t1}(t2, eta))|`.
pub fn check_forward_dpp(fv: &ForwardValue, t1: usize, eta: &TreeRandomVariable) -> Result<ForwardDppReport> {
    let t2 = eta.level;
    if t1 > t2 {
        return Err(Error::InvalidArgument(format!("need t1 <= t2, got {t1} and {t2}")));
    }
    let direct = fv.eval(eta)?;
    if t1 == t2 {
        return Ok(ForwardDppReport { t1, t2, direct: direct.value, split: direct.value, residual: 0.0, exact: direct.exact });
    }
    let tree = fv.tree;
    let dp = fv.problem.value_dim();
    let seg = Segment::full(tree, t1, t2)?;
    let terminal = seg.gather_terminal(eta)?;
    let mut best = f64::NEG_INFINITY;
    let mut exact = direct.exact;
    let mut failure = None;
    let mut visit = |_: &[u32], values: &[f64]| {
        if failure.is_some() {
            return;
        }
        let mut zeta = TreeRandomVariable::new(t1, dp, vec![0.0; tree.level_len(t1) * dp]);
        for (j, &node) in seg.nodes(0).iter().enumerate() {
            zeta.node_mut(node).copy_from_slice(&values[j * dp..(j + 1) * dp]);
        }
        match fv.eval(&zeta) {
            Ok(e) => {
                exact &= e.exact;
                best = best.max(e.value);
            }
            Err(e) => failure = Some(e),
        }
    };
    fv.engine.for_each_policy(&seg, &terminal, fv.options.cap, &mut visit)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(ForwardDppReport { t1, t2, direct: direct.value, split: best, residual: (direct.value - best).abs(), exact })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub level: usize,
    pub pairs: usize,
    pub skipped: usize,
    /// Largest `|Psi(eta1) - Psi(eta2)| / ||eta1 - eta2||`.
    pub fitted: f64,
    /// `exp((L + L^2 (1 + dt) / 2) T) Lip(phi)`.
    pub bound: f64,
    pub passed: bool,
}

/// Theoretical Lipschitz constant of `Psi(t, .)` in the tree `L^2` norm.
pub fn lipschitz_bound(problem: &BsdeProblem, tree: &ScenarioTree, level: usize, phi_lipschitz: f64) -> f64 {
    let l = problem.lipschitz();
    let t = tree.time(level);
    ((l + 0.5 * l * l * (1.0 + tree.dt())) * t).exp() * phi_lipschitz
}

/// Fits the Lipschitz ratio of `Psi(t_k, .)` over the pairs.
pub fn check_lipschitz(
    fv: &ForwardValue,
    pairs: &[(TreeRandomVariable, TreeRandomVariable)],
    phi_lipschitz: f64,
) -> Result<LipschitzReport> {
    let level = pairs.first().map_or(0, |p| p.0.level);
    let mut fitted: f64 = 0.0;
    let mut skipped = 0;
    for (a, b) in pairs {
        let dist = a.distance(b, fv.tree);
        if dist == 0.0 {
            skipped += 1;
            continue;
        }
        fitted = fitted.max((fv.value(a)? - fv.value(b)?).abs() / dist);
    }
    let bound = lipschitz_bound(fv.problem, fv.tree, level, phi_lipschitz);
    Ok(LipschitzReport { level, pairs: pairs.len(), skipped, fitted, bound, passed: fitted <= bound * (1.0 + 1e-12) })
}

/// Seeded pairs of level-`k` variables with entries uniform on `[-1, 1]`.
pub fn random_pairs(tree: &ScenarioTree, level: usize, dim: usize, count: usize, seed: u64) -> Vec<(TreeRandomVariable, TreeRandomVariable)> {
    let unit = Uniform::new_inclusive(-1.0f64, 1.0);
    let len = tree.level_len(level) * dim;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let a = (0..len).map(|_| unit.sample(&mut rng)).collect();
            let b = (0..len).map(|_| unit.sample(&mut rng)).collect();
            (TreeRandomVariable::new(level, dim, a), TreeRandomVariable::new(level, dim, b))
        })
        .collect()
}

type PathFn = Arc<dyn Fn(&NodeCtx, &mut [f64]) + Send + Sync>;

/// A process `v(s, omega)` with caller-supplied derivatives: `value`,
/// `dt` (horizontal), `dw` (vertical, `d' * d` entries, row-major) and
/// `dww` (the trace term `tr d^2 v`, `d'` entries).
#[derive(Clone)]
pub struct CylinderFunctional {
    pub name: String,
    pub dim: usize,
    pub value: PathFn,
    pub dt: PathFn,
    pub dw: PathFn,
    pub dww: PathFn,
}

impl std::fmt::Debug for CylinderFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylinderFunctional").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

impl CylinderFunctional {
    pub fn new<V, T, W, WW>(name: impl Into<String>, dim: usize, value: V, dt: T, dw: W, dww: WW) -> Self
    where
        V: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
        T: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
        W: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
        WW: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
    {
        Self { name: name.into(), dim, value: Arc::new(value), dt: Arc::new(dt), dw: Arc::new(dw), dww: Arc::new(dww) }
    }

    /// `v = B_t` (one noise dimension).
    pub fn brownian() -> Self {
        Self::new("B", 1, |c, o| o[0] = c.brownian[0], |_, o| o[0] = 0.0, |_, o| o[0] = 1.0, |_, o| o[0] = 0.0)
    }

    /// `v = B_t^2`.
    pub fn brownian_squared() -> Self {
        Self::new(
            "B^2",
            1,
            |c, o| o[0] = c.brownian[0] * c.brownian[0],
            |_, o| o[0] = 0.0,
            |c, o| o[0] = 2.0 * c.brownian[0],
            |_, o| o[0] = 2.0,
        )
    }

    /// `v = t B_t`.
    pub fn time_brownian() -> Self {
        Self::new(
            "tB",
            1,
            |c, o| o[0] = c.time * c.brownian[0],
            |c, o| o[0] = c.brownian[0],
            |c, o| o[0] = c.time,
            |_, o| o[0] = 0.0,
        )
    }

    /// `v = t B_t^2`.
    pub fn time_brownian_squared() -> Self {
        Self::new(
            "tB^2",
            1,
            |c, o| o[0] = c.time * c.brownian[0] * c.brownian[0],
            |c, o| o[0] = c.brownian[0] * c.brownian[0],
            |c, o| o[0] = 2.0 * c.time * c.brownian[0],
            |c, o| o[0] = 2.0 * c.time,
        )
    }

    /// A constant `y`.
    pub fn constant(y: Vec<f64>) -> Self {
        let dim = y.len();
        Self::new("const", dim, move |_, o| o.copy_from_slice(&y), |_, o| o.fill(0.0), |_, o| o.fill(0.0), |_, o| o.fill(0.0))
    }

    fn level_values(&self, tree: &ScenarioTree, k: usize, f: &PathFn, width: usize) -> Result<TreeRandomVariable> {
        tree.random_variable(k, width, |ctx, out| f(ctx, out))
    }

    /// `eta = v(t_k, .)` at level `k`.
    pub fn at(&self, tree: &ScenarioTree, k: usize) -> Result<TreeRandomVariable> {
        self.level_values(tree, k, &self.value, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeProbe {
    pub name: String,
    /// Largest one-step residual of the discrete functional Ito identity.
    pub max_residual: f64,
    /// Root-mean-square one-step residual under the tree measure.
    pub rms_residual: f64,
    /// `dt^{3/2}`, the expected order.
    pub scale: f64,
    pub transitions: usize,
}

/// One-step residual `v(k+1) - v(k) - dt_v dt - dw_v dB - tr(dww_v) dt / 2`
/// over every transition of the tree.
pub fn path_derivative_probe(cyl: &CylinderFunctional, tree: &ScenarioTree) -> Result<DerivativeProbe> {
    let (dp, d) = (cyl.dim, tree.dim());
    let dt = tree.dt();
    let inc = tree.increments();
    let mut worst: f64 = 0.0;
    let mut mean_sq = 0.0;
    let mut transitions = 0;
    let branch_weight = 1.0 / tree.branching() as f64;
    let (mut v0, mut v1) = (vec![0.0; dp], vec![0.0; dp]);
    let (mut vt, mut vw, mut vww) = (vec![0.0; dp], vec![0.0; dp * d], vec![0.0; dp]);
    let (mut b0, mut b1) = (Vec::new(), Vec::new());
    for k in 0..tree.steps() {
        let probs = tree.probabilities(k);
        for node in 0..tree.level_len(k) {
            let ctx = tree.node_ctx(k, node, &mut b0);
            (cyl.value)(&ctx, &mut v0);
            (cyl.dt)(&ctx, &mut vt);
            (cyl.dw)(&ctx, &mut vw);
            (cyl.dww)(&ctx, &mut vww);
            for c in 0..tree.branching() {
                let child = tree.child(k, node, c);
                let cctx = tree.node_ctx(k + 1, child, &mut b1);
                (cyl.value)(&cctx, &mut v1);
                for i in 0..dp {
                    let mut predicted = vt[i] * dt + 0.5 * vww[i] * dt;
                    for l in 0..d {
                        predicted += vw[i * d + l] * inc[c * d + l];
                    }
                    let r = v1[i] - v0[i] - predicted;
                    worst = worst.max(r.abs());
                    mean_sq += probs[node] * branch_weight * r * r;
                }
                transitions += 1;
            }
        }
    }
    let rms_residual = (mean_sq / tree.steps() as f64).sqrt();
    Ok(DerivativeProbe { name: cyl.name.clone(), max_residual: worst, rms_residual, scale: dt.powf(1.5), transitions })
}

/// Finite-difference settings for [`master_residual`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Bump size is `relative_step * (1 + |eta_i|)`.
    pub relative_step: f64,
    /// Threshold on the root-mean-square Ito probe residual of the cylinder,
    /// in units of `dt^{3/2}`. Correct derivatives give `O(dt^{3/2})`, a wrong
    /// vertical derivative `O(dt^{1/2})` and a wrong drift term `O(dt)`.
    pub probe_factor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { relative_step: 1e-4, probe_factor: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterResidual {
    pub level: usize,
    pub dt: f64,
    /// `(Psi(t, eta) - Psi(t - dt, eta stopped at t - dt)) / dt`.
    pub left_derivative: f64,
    /// `<D_eta Psi, dt_eta + tr(dww_eta) / 2>`.
    pub transport: f64,
    /// `sup_u <D_eta Psi, f(t, eta, dw_eta, u)>`, maximized node by node.
    pub hamiltonian: f64,
    pub residual: f64,
    /// `D_eta Psi` per node, `d'` entries each (Riesz representative).
    pub gradient: Vec<f64>,
}

/// `D_eta Psi(t_k, eta)` by central per-node bumps, as a level-`k`
/// variable: entry `(i, c)` is `(Psi(eta + h e_{i,c}) - Psi(eta - h e_{i,c})) / (2 h p_i)`.
pub fn eta_gradient(fv: &ForwardValue, eta: &TreeRandomVariable, relative_step: f64) -> Result<TreeRandomVariable> {
    let probs = fv.tree.probabilities(eta.level);
    let mut grad = TreeRandomVariable::new(eta.level, eta.dim, vec![0.0; eta.values.len()]);
    let mut bumped = eta.clone();
    for (idx, &base) in eta.values.iter().enumerate() {
        let h = relative_step * (1.0 + base.abs());
        bumped.values[idx] = base + h;
        let up = fv.value(&bumped)?;
        bumped.values[idx] = base - h;
        let down = fv.value(&bumped)?;
        bumped.values[idx] = base;
        grad.values[idx] = (up - down) / (2.0 * h * probs[idx / eta.dim]);
    }
    Ok(grad)
}

/// Residual of the master equation
/// `D^-_t Psi = <D_eta Psi, dt_eta + tr(dww_eta) / 2> + sup_u <D_eta Psi, f(t, eta, dw_eta, u)>`
/// at `(t_k, v(t_k, .))`.
pub fn master_residual(fv: &ForwardValue, cyl: &CylinderFunctional, k: usize, fd: &FdConfig) -> Result<MasterResidual> {
    let tree = fv.tree;
    let problem = fv.problem;
    if k == 0 {
        return Err(Error::InvalidArgument("the left time derivative needs level k >= 1".into()));
    }
    tree.check_level(k)?;
    if cyl.dim != problem.value_dim() {
        return Err(Error::Dimension("cylinder and problem dimensions differ".into()));
    }
    let probe = path_derivative_probe(cyl, tree)?;
    if probe.rms_residual > fd.probe_factor * probe.scale + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "cylinder '{}' fails the functional Ito probe: rms residual {:.3e} exceeds {:.3e}",
            cyl.name,
            probe.rms_residual,
            fd.probe_factor * probe.scale
        )));
    }
    let dt = tree.dt();
    let eta = cyl.at(tree, k)?;
    let stopped = cyl.at(tree, k - 1)?;
    let left_derivative = (fv.value(&eta)? - fv.value(&stopped)?) / dt;
    let grad = eta_gradient(fv, &eta, fd.relative_step)?;
    let probs = tree.probabilities(k);
    let (dp, d) = (cyl.dim, tree.dim());
    let (mut vt, mut vw, mut vww, mut f) = (vec![0.0; dp], vec![0.0; dp * d], vec![0.0; dp], vec![0.0; dp]);
    let mut buf = Vec::new();
    let (mut transport, mut hamiltonian) = (0.0, 0.0);
    for node in 0..tree.level_len(k) {
        let ctx = tree.node_ctx(k, node, &mut buf);
        (cyl.dt)(&ctx, &mut vt);
        (cyl.dw)(&ctx, &mut vw);
        (cyl.dww)(&ctx, &mut vww);
        let g = grad.node(node);
        let y = eta.node(node);
        transport += probs[node] * (0..dp).map(|i| g[i] * (vt[i] + 0.5 * vww[i])).sum::<f64>();
        let mut best = f64::NEG_INFINITY;
        for ui in 0..problem.controls().len() {
            problem.generator(&ctx, y, &vw, problem.controls().point(ui), &mut f);
            best = best.max((0..dp).map(|i| g[i] * f[i]).sum::<f64>());
        }
        hamiltonian += probs[node] * best;
    }
    Ok(MasterResidual {
        level: k,
        dt,
        left_derivative,
        transport,
        hamiltonian,
        residual: left_derivative - transport - hamiltonian,
        gradient: grad.values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllPosedReport {
    /// Right-hand side `sup_u <D_eta Psi, f_i(t, eta, 0, u)>` for each generator.
    pub rhs: [f64; 2],
    pub rhs_identical: bool,
    pub psi: [f64; 2],
    pub gap: f64,
    pub min_gap: f64,
    /// Both right sides agree and the values differ by at least `min_gap`.
    pub witness: bool,
}

/// Evaluates the right-derivative equation with two generators that agree at
/// `z = 0` but differ elsewhere: the right sides coincide, the values do not.
pub fn illposed_demo(first: &BsdeProblem, second: &BsdeProblem, tree: &ScenarioTree, min_gap: f64) -> Result<IllPosedReport> {
    if first.value_dim() != second.value_dim() || first.controls() != second.controls() {
        return Err(Error::Structure("the two problems must share dimensions and controls".into()));
    }
    let dp = first.value_dim();
    let zd = dp * tree.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x111_9053d);
    let unit = Uniform::new_inclusive(-2.0f64, 2.0);
    let zero = vec![0.0; zd];
    let (mut f1, mut f2) = (vec![0.0; dp], vec![0.0; dp]);
    let mut buf = Vec::new();
    for probe in 0..256 {
        let k = probe % (tree.steps() + 1);
        let node = probe % tree.level_len(k);
        let ctx = tree.node_ctx(k, node, &mut buf);
        let y: Vec<f64> = (0..dp).map(|_| unit.sample(&mut rng)).collect();
        for ui in 0..first.controls().len() {
            let u = first.controls().point(ui);
            first.generator(&ctx, &y, &zero, u, &mut f1);
            second.generator(&ctx, &y, &zero, u, &mut f2);
            if f1 != f2 {
                return Err(Error::Structure(format!("generators differ at z = 0 (level {k}, node {node})")));
            }
        }
    }
    // A shared derivative input: D_eta Psi of the first problem at xi.
    let n = tree.steps();
    let xi = crate::bsde::terminal_variable(first, tree)?;
    let fv1 = ForwardValue::new(first, tree, SearchOptions::default())?;
    let fv2 = ForwardValue::new(second, tree, SearchOptions::default())?;
    let grad = eta_gradient(&fv1, &xi, FdConfig::default().relative_step)?;
    let probs = tree.probabilities(n);
    let mut rhs = [0.0; 2];
    for (slot, problem) in [first, second].into_iter().enumerate() {
        let mut f = vec![0.0; dp];
        for node in 0..tree.level_len(n) {
            let ctx = tree.node_ctx(n, node, &mut buf);
            let g = grad.node(node);
            let mut best = f64::NEG_INFINITY;
            for ui in 0..problem.controls().len() {
                problem.generator(&ctx, xi.node(node), &zero, problem.controls().point(ui), &mut f);
                best = best.max((0..dp).map(|i| g[i] * f[i]).sum::<f64>());
            }
            rhs[slot] += probs[node] * best;
        }
    }
    let xi2 = crate::bsde::terminal_variable(second, tree)?;
    let psi = [fv1.value(&xi)?, fv2.value(&xi2)?];
    let gap = (psi[0] - psi[1]).abs();
    let rhs_identical = rhs[0].to_bits() == rhs[1].to_bits();
    Ok(IllPosedReport { rhs, rhs_identical, psi, gap, min_gap, witness: rhs_identical && gap >= min_gap })
}

/// The shipped pair: `xi = B_T`, `phi = id`, `f_1 = 0` and `f_2 = z`.
pub fn illposed_pair() -> (BsdeProblem, BsdeProblem) {
    let base = BsdeProblem::new(
        1,
        1,
        crate::bsde::ControlSet::scalar(&[0.0]).expect("static control set"),
        0.0,
        |_, _, _, _, out| out[0] = 0.0,
        |ctx, out| out[0] = ctx.brownian[0],
        |y| y[0],
    )
    .named("f=0");
    let shifted = base.clone().with_generator(|_, _, z, _, out| out[0] = z[0], 1.0).named("f=z");
    (base, shifted)
}

/// A small problem with a declared Lipschitz constant of its utility.
#[derive(Clone)]
pub struct ReferenceProblem {
    pub problem: BsdeProblem,
    pub phi_lipschitz: f64,
}

/// Small problems covering scalar and two-dimensional values, both control
/// classes, and generators depending on `y`, `z` and `u`.
pub fn reference_problems() -> Vec<ReferenceProblem> {
    use crate::bsde::{ControlClass, ControlSet};
    let scalar = BsdeProblem::new(
        1,
        1,
        ControlSet::scalar(&[-1.0, 0.0, 1.0]).expect("static control set"),
        1.0,
        |_, y, z, u, out| out[0] = u[0] * z[0] + 0.3 * y[0].sin() - 0.2 * u[0] * u[0],
        |ctx, out| out[0] = ctx.brownian[0].abs(),
        |y| -(y[0] - 0.2).abs(),
    )
    .named("scalar");
    let pair = BsdeProblem::new(
        2,
        1,
        ControlSet::scalar(&[-0.5, 0.5]).expect("static control set"),
        1.0,
        |_, y, z, u, out| {
            out[0] = u[0] * z[1] + 0.25 * y[1];
            out[1] = -u[0] * y[0] + 0.5 * z[0];
        },
        |ctx, out| {
            out[0] = ctx.brownian[0];
            out[1] = ctx.brownian[0] * ctx.brownian[0];
        },
        |y| y[0] - 0.5 * y[1].abs(),
    )
    .named("pair");
    let pair_lip = (1.0f64 + 0.25).sqrt();
    vec![
        ReferenceProblem { problem: scalar.clone(), phi_lipschitz: 1.0 },
        ReferenceProblem { problem: pair.clone(), phi_lipschitz: pair_lip },
        ReferenceProblem {
            problem: scalar.with_class(ControlClass::Deterministic).named("scalar-deterministic"),
            phi_lipschitz: 1.0,
        },
        ReferenceProblem {
            problem: pair.with_class(ControlClass::Deterministic).named("pair-deterministic"),
            phi_lipschitz: pair_lip,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{TimeGrid, TreeMode};

    #[test]
    fn quadratic_cylinders_are_exact_on_the_tree() {
        let tree = ScenarioTree::new(TimeGrid::new(1.0, 6).unwrap(), 1, TreeMode::Recombining).unwrap();
        for cyl in [CylinderFunctional::brownian(), CylinderFunctional::brownian_squared()] {
            assert!(path_derivative_probe(&cyl, &tree).unwrap().max_residual < 1e-14);
        }
        let p = path_derivative_probe(&CylinderFunctional::time_brownian(), &tree).unwrap();
        assert!(p.max_residual > 0.0 && p.max_residual <= p.scale * 1.0001);
    }

    #[test]
    fn wrong_derivatives_are_rejected() {
        let tree = ScenarioTree::new(TimeGrid::new(1.0, 16).unwrap(), 1, TreeMode::Recombining).unwrap();
        let (p, _) = illposed_pair();
        let fv = ForwardValue::new(&p, &tree, SearchOptions::default()).unwrap();
        let bad = CylinderFunctional::new("bad", 1, |c, o| o[0] = c.brownian[0], |_, o| o[0] = 0.0, |_, o| o[0] = 2.0, |_, o| o[0] = 0.0);
        assert!(master_residual(&fv, &bad, 2, &FdConfig::default()).is_err());
    }
}
