//! Controlled BSDEs on scenario trees.
//!
//! The explicit backward scheme is
//!
//! ```text
//! Z_j = E_j[Y_{j+1} dB_j^T] / dt
//! Y_j = E_j[Y_{j+1}] + f(t_j, node, E_j[Y_{j+1}], Z_j, u_j) dt
//! ```
//!
//! Controls are indices into a finite [`ControlSet`]. A [`Policy`] assigns one
//! control per non-terminal node of a [`Segment`] (adapted controls) or one
//! per level (deterministic controls). Static values, reachable sets and
//! forward values are computed by brute-force enumeration of policies, with
//! a coordinate-ascent fallback that is always reported as heuristic.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{NodeCtx, ScenarioTree, TreeMode, TreeRandomVariable};

/// Driver `f(ctx, y, z, u, out)`; `z` is `d' x d` row-major.
pub type GeneratorFn = dyn Fn(&NodeCtx, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// Terminal condition `xi(ctx, out)` evaluated at terminal nodes.
pub type TerminalFn = dyn Fn(&NodeCtx, &mut [f64]) + Send + Sync;
/// Utility `phi(y)`.
pub type UtilityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Default cap on the number of enumerated policies.
pub const DEFAULT_POLICY_CAP: u64 = 1_000_000;

/// Points closer than this (sup norm) are merged in reachable sets.
pub const REACHABLE_DEDUP_TOL: f64 = 1e-10;

/// A finite set of control values in `R^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    dim: usize,
    points: Vec<f64>,
}

impl ControlSet {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "control set needs a positive number of {dim}-dimensional points, got {} values",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("control values must be finite".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    /// `count` equally spaced scalar controls spanning `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 || !(hi > lo) {
            return Self::scalar(&[lo]);
        }
        let values: Vec<f64> =
            (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect();
        Self::scalar(&values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_abs(&self) -> f64 {
        self.points.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Which control processes the optimizer ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlClass {
    /// One control per tree node (adapted to the tree filtration).
    Adapted,
    /// One control per time level (deterministic controls).
    Deterministic,
}

/// A controlled BSDE together with its utility.
#[derive(Clone)]
pub struct BsdeProblem {
    name: String,
    value_dim: usize,
    noise_dim: usize,
    generator: Arc<GeneratorFn>,
    terminal: Arc<TerminalFn>,
    utility: Arc<UtilityFn>,
    controls: ControlSet,
    lipschitz: f64,
    class: ControlClass,
    path_dependent: bool,
}

impl fmt::Debug for BsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeProblem")
            .field("name", &self.name)
            .field("value_dim", &self.value_dim)
            .field("noise_dim", &self.noise_dim)
            .field("controls", &self.controls)
            .field("lipschitz", &self.lipschitz)
            .field("class", &self.class)
            .field("path_dependent", &self.path_dependent)
            .finish()
    }
}

impl BsdeProblem {
    /// A problem with declared Lipschitz constant `lipschitz` in `(y, z)`.
    pub fn new<G, T, U>(
        value_dim: usize,
        noise_dim: usize,
        controls: ControlSet,
        lipschitz: f64,
        generator: G,
        terminal: T,
        utility: U,
    ) -> Self
    where
        G: Fn(&NodeCtx, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        T: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
        U: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: String::from("unnamed"),
            value_dim,
            noise_dim,
            generator: Arc::new(generator),
            terminal: Arc::new(terminal),
            utility: Arc::new(utility),
            controls,
            lipschitz,
            class: ControlClass::Adapted,
            path_dependent: false,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_class(mut self, class: ControlClass) -> Self {
        self.class = class;
        self
    }

    /// Marks the generator or terminal condition as path-dependent, which
    /// restricts the problem to path-mode trees.
    pub fn with_path_dependence(mut self, path_dependent: bool) -> Self {
        self.path_dependent = path_dependent;
        self
    }

    pub fn with_utility<U>(mut self, utility: U) -> Self
    where
        U: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.utility = Arc::new(utility);
        self
    }

    pub fn with_terminal<T>(mut self, terminal: T) -> Self
    where
        T: Fn(&NodeCtx, &mut [f64]) + Send + Sync + 'static,
    {
        self.terminal = Arc::new(terminal);
        self
    }

    pub fn with_generator<G>(mut self, generator: G, lipschitz: f64) -> Self
    where
        G: Fn(&NodeCtx, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.generator = Arc::new(generator);
        self.lipschitz = lipschitz;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn class(&self) -> ControlClass {
        self.class
    }

    pub fn is_path_dependent(&self) -> bool {
        self.path_dependent
    }

    #[inline]
    pub fn generator(&self, ctx: &NodeCtx, y: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        (self.generator)(ctx, y, z, u, out)
    }

    #[inline]
    pub fn terminal(&self, ctx: &NodeCtx, out: &mut [f64]) {
        (self.terminal)(ctx, out)
    }

    #[inline]
    pub fn utility(&self, y: &[f64]) -> f64 {
        (self.utility)(y)
    }

    pub fn utility_fn(&self) -> Arc<UtilityFn> {
        self.utility.clone()
    }

    /// Checks dimensions, tree compatibility and the declared Lipschitz
    /// constant (256 seeded random finite-difference probes).
    pub fn validate(&self, tree: &ScenarioTree) -> Result<()> {
        if self.value_dim == 0 {
            return Err(Error::ProblemValidation("value dimension must be positive".into()));
        }
        if self.noise_dim != tree.dim() {
            return Err(Error::Dimension(format!(
                "problem expects {}-dimensional noise, tree has {}",
                self.noise_dim,
                tree.dim()
            )));
        }
        if self.path_dependent && tree.mode() != TreeMode::Path {
            return Err(Error::PathModeRequired);
        }
        if !(self.lipschitz.is_finite() && self.lipschitz >= 0.0) {
            return Err(Error::ProblemValidation(format!(
                "declared Lipschitz constant must be finite and nonnegative, got {}",
                self.lipschitz
            )));
        }
        self.probe_lipschitz(tree)?;
        if self.lipschitz > 0.0 && tree.dt() >= 1.0 / (2.0 * self.lipschitz) {
            log::warn!(
                "{}: dt = {} is not below 1/(2L) = {}; the explicit scheme may be unstable",
                self.name,
                tree.dt(),
                1.0 / (2.0 * self.lipschitz)
            );
        }
        Ok(())
    }

    fn probe_lipschitz(&self, tree: &ScenarioTree) -> Result<()> {
        let (dp, d) = (self.value_dim, self.noise_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(0x11b5_c0de);
        let mut buf = Vec::new();
        let (mut y1, mut y2) = (vec![0.0; dp], vec![0.0; dp]);
        let (mut z1, mut z2) = (vec![0.0; dp * d], vec![0.0; dp * d]);
        let (mut f1, mut f2) = (vec![0.0; dp], vec![0.0; dp]);
        for _ in 0..256 {
            let k = rng.gen_range(0..tree.steps());
            let node = rng.gen_range(0..tree.level_len(k));
            let u = self.controls.point(rng.gen_range(0..self.controls.len()));
            let scale = if rng.gen_bool(0.5) { 1e-3 } else { 1.0 };
            for v in y1.iter_mut().chain(z1.iter_mut()) {
                *v = rng.gen_range(-2.0..2.0);
            }
            for (a, b) in y1.iter().zip(y2.iter_mut()).chain(z1.iter().zip(z2.iter_mut())) {
                *b = a + scale * rng.gen_range(-1.0..1.0);
            }
            let ctx = tree.node_ctx(k, node, &mut buf);
            self.generator(&ctx, &y1, &z1, u, &mut f1);
            self.generator(&ctx, &y2, &z2, u, &mut f2);
            if f1.iter().chain(&f2).any(|v| !v.is_finite()) {
                return Err(Error::ProblemValidation(format!(
                    "generator returned a non-finite value at level {k}, node {node}"
                )));
            }
            let df = norm(&f1.iter().zip(&f2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let dy = norm(&y1.iter().zip(&y2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let dz = norm(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let bound = self.lipschitz * (dy + dz);
            if df > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::ProblemValidation(format!(
                    "{}: generator change {df:.3e} exceeds declared Lipschitz bound {bound:.3e} \
                     at level {k}, node {node}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A connected band of tree levels `start..=end`, either every node of those
/// levels or the descendants of one node.
#[derive(Debug, Clone)]
pub struct Segment {
    start: usize,
    end: usize,
    nodes: Vec<Vec<usize>>,
    /// For each non-terminal level, local child ids (`branching` per node).
    children: Vec<Vec<u32>>,
    branching: usize,
}

impl Segment {
    /// All nodes of levels `start..=end`.
    pub fn full(tree: &ScenarioTree, start: usize, end: usize) -> Result<Self> {
        Self::check_levels(tree, start, end)?;
        let roots: Vec<usize> = (0..tree.level_len(start)).collect();
        Self::from_roots(tree, start, roots, end)
    }

    /// Node `node` at level `start` and all its descendants up to `end`.
    pub fn cone(tree: &ScenarioTree, start: usize, node: usize, end: usize) -> Result<Self> {
        Self::check_levels(tree, start, end)?;
        tree.check_node(start, node)?;
        Self::from_roots(tree, start, vec![node], end)
    }

    fn check_levels(tree: &ScenarioTree, start: usize, end: usize) -> Result<()> {
        tree.check_level(end)?;
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "segment start {start} is after its end {end}"
            )));
        }
        Ok(())
    }

    fn from_roots(tree: &ScenarioTree, start: usize, roots: Vec<usize>, end: usize) -> Result<Self> {
        let b = tree.branching();
        let mut nodes = vec![roots];
        let mut children = Vec::with_capacity(end - start);
        for k in start..end {
            let current = nodes.last().expect("segment has a first level");
            let full = current.len() == tree.level_len(k);
            let (next, local): (Vec<usize>, Vec<u32>) = if full {
                let next: Vec<usize> = (0..tree.level_len(k + 1)).collect();
                let local = current
                    .iter()
                    .flat_map(|&n| (0..b).map(move |c| (n, c)))
                    .map(|(n, c)| tree.child(k, n, c) as u32)
                    .collect();
                (next, local)
            } else {
                let mut next: Vec<usize> = current
                    .iter()
                    .flat_map(|&n| (0..b).map(move |c| (n, c)))
                    .map(|(n, c)| tree.child(k, n, c))
                    .collect();
                next.sort_unstable();
                next.dedup();
                let local = current
                    .iter()
                    .flat_map(|&n| (0..b).map(move |c| (n, c)))
                    .map(|(n, c)| {
                        next.binary_search(&tree.child(k, n, c)).expect("child is in the next level")
                            as u32
                    })
                    .collect();
                (next, local)
            };
            children.push(local);
            nodes.push(next);
        }
        Ok(Self { start, end, nodes, children, branching: b })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Global node ids of level `start + offset`.
    pub fn nodes(&self, offset: usize) -> &[usize] {
        &self.nodes[offset]
    }

    /// Number of levels that carry controls (`end - start`).
    pub fn control_levels(&self) -> usize {
        self.end - self.start
    }

    /// Number of controlled nodes.
    pub fn controlled_nodes(&self) -> usize {
        self.nodes[..self.control_levels()].iter().map(Vec::len).sum()
    }

    /// Number of independent policy coordinates under `class`.
    pub fn coordinates(&self, class: ControlClass) -> usize {
        match class {
            ControlClass::Adapted => self.controlled_nodes(),
            ControlClass::Deterministic => self.control_levels(),
        }
    }

    /// Number of policies with `controls` choices per coordinate (as `f64`,
    /// since it overflows quickly).
    pub fn policy_count(&self, class: ControlClass, controls: usize) -> f64 {
        (controls as f64).powi(self.coordinates(class) as i32)
    }

    #[inline]
    fn child_local(&self, offset: usize, local: usize, c: usize) -> usize {
        self.children[offset][local * self.branching + c] as usize
    }

    /// Gathers a level-`end` random variable onto the segment's last level.
    pub fn gather_terminal(&self, eta: &TreeRandomVariable) -> Result<Vec<f64>> {
        if eta.level != self.end {
            return Err(Error::InvalidArgument(format!(
                "terminal value lives at level {}, segment ends at {}",
                eta.level, self.end
            )));
        }
        let last = &self.nodes[self.end - self.start];
        let mut out = Vec::with_capacity(last.len() * eta.dim);
        for &n in last {
            out.extend_from_slice(eta.node(n));
        }
        Ok(out)
    }
}

/// Control choices over a segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Policy {
    class: ControlClass,
    /// Control indices per controlled level (`nodes` entries, or one entry
    /// for deterministic policies).
    choices: Vec<Vec<u32>>,
}

impl Policy {
    /// Every coordinate uses control `index`.
    pub fn constant(segment: &Segment, class: ControlClass, index: u32) -> Self {
        let choices = (0..segment.control_levels())
            .map(|off| match class {
                ControlClass::Adapted => vec![index; segment.nodes(off).len()],
                ControlClass::Deterministic => vec![index],
            })
            .collect();
        Self { class, choices }
    }

    /// Builds a policy from coordinates in canonical order (level-major from
    /// the first level, nodes in tree order).
    pub fn from_digits(segment: &Segment, class: ControlClass, digits: &[u32]) -> Result<Self> {
        if digits.len() != segment.coordinates(class) {
            return Err(Error::Dimension(format!(
                "policy needs {} coordinates, got {}",
                segment.coordinates(class),
                digits.len()
            )));
        }
        let mut it = digits.iter().copied();
        let choices = (0..segment.control_levels())
            .map(|off| {
                let len = match class {
                    ControlClass::Adapted => segment.nodes(off).len(),
                    ControlClass::Deterministic => 1,
                };
                it.by_ref().take(len).collect()
            })
            .collect();
        Ok(Self { class, choices })
    }

    /// Builds an adapted policy from a rule evaluated at each node.
    pub fn from_fn(
        segment: &Segment,
        class: ControlClass,
        rule: impl Fn(usize, usize) -> u32,
    ) -> Self {
        let choices = (0..segment.control_levels())
            .map(|off| {
                let level = segment.start() + off;
                match class {
                    ControlClass::Adapted => {
                        segment.nodes(off).iter().map(|&n| rule(level, n)).collect()
                    }
                    ControlClass::Deterministic => vec![rule(level, 0)],
                }
            })
            .collect();
        Self { class, choices }
    }

    pub fn class(&self) -> ControlClass {
        self.class
    }

    /// Coordinates in canonical order.
    pub fn digits(&self) -> Vec<u32> {
        self.choices.iter().flatten().copied().collect()
    }

    /// Control index used at local node `local` of level `start + offset`.
    #[inline]
    pub fn control(&self, offset: usize, local: usize) -> usize {
        match self.class {
            ControlClass::Adapted => self.choices[offset][local] as usize,
            ControlClass::Deterministic => self.choices[offset][0] as usize,
        }
    }

    /// Control index per controlled level (deterministic policies) or per
    /// node (adapted), grouped by level.
    pub fn choices(&self) -> &[Vec<u32>] {
        &self.choices
    }

    fn check(&self, segment: &Segment, controls: usize) -> Result<()> {
        let ok = self.choices.len() == segment.control_levels()
            && self.choices.iter().enumerate().all(|(off, c)| {
                let len = match self.class {
                    ControlClass::Adapted => segment.nodes(off).len(),
                    ControlClass::Deterministic => 1,
                };
                c.len() == len && c.iter().all(|&i| (i as usize) < controls)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("policy does not match the segment or control set".into()))
        }
    }
}

/// Y and Z on every level of a solved segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    /// `Y` at levels `start..=end`, as random variables on the full levels
    /// (entries outside the segment are zero).
    pub y: Vec<TreeRandomVariable>,
    /// `Z` at levels `start..end` (`d' * d` values per node).
    pub z: Vec<TreeRandomVariable>,
}

/// Evaluates the backward scheme on segments of one tree.
pub struct Engine<'a> {
    problem: &'a BsdeProblem,
    tree: &'a ScenarioTree,
    increments: Vec<f64>,
}

impl<'a> Engine<'a> {
    /// Validates `problem` against `tree` once.
    pub fn new(problem: &'a BsdeProblem, tree: &'a ScenarioTree) -> Result<Self> {
        problem.validate(tree)?;
        Ok(Self::unchecked(problem, tree))
    }

    pub(crate) fn unchecked(problem: &'a BsdeProblem, tree: &'a ScenarioTree) -> Self {
        Self { problem, tree, increments: tree.increments() }
    }

    pub fn problem(&self) -> &'a BsdeProblem {
        self.problem
    }

    pub fn tree(&self) -> &'a ScenarioTree {
        self.tree
    }

    /// One backward step at a node: averages the children, forms `Z`, and
    /// applies the driver with control `u`. Writes `y` (`d'`) and `z`
    /// (`d' * d`).
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step(
        &self,
        level: usize,
        node: usize,
        children: &mut dyn Iterator<Item = &'_ [f64]>,
        u: &[f64],
        buf: &mut Vec<f64>,
        fbuf: &mut [f64],
        y: &mut [f64],
        z: &mut [f64],
    ) {
        let tree = self.tree;
        let (dp, d) = (self.problem.value_dim, tree.dim());
        let b = tree.branching();
        let scale = 1.0 / b as f64;
        y.iter_mut().for_each(|v| *v = 0.0);
        z.iter_mut().for_each(|v| *v = 0.0);
        for (c, ch) in children.enumerate() {
            let inc = &self.increments[c * d..(c + 1) * d];
            for i in 0..dp {
                y[i] += ch[i];
                for l in 0..d {
                    z[i * d + l] += ch[i] * inc[l];
                }
            }
        }
        let zscale = scale / tree.dt();
        y.iter_mut().for_each(|v| *v *= scale);
        z.iter_mut().for_each(|v| *v *= zscale);
        let ctx = tree.node_ctx(level, node, buf);
        self.problem.generator(&ctx, y, z, u, fbuf);
        let dt = tree.dt();
        for (yi, fi) in y.iter_mut().zip(fbuf.iter()) {
            *yi += fi * dt;
        }
    }

    /// Solves the segment under `policy`, returning Y and Z on all levels.
    pub fn solve(
        &self,
        segment: &Segment,
        policy: &Policy,
        terminal: &[f64],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        policy.check(segment, self.problem.controls.len())?;
        let dp = self.problem.value_dim;
        let zd = dp * self.tree.dim();
        let levels = segment.control_levels();
        if terminal.len() != segment.nodes(levels).len() * dp {
            return Err(Error::Dimension(format!(
                "terminal values: expected {}, got {}",
                segment.nodes(levels).len() * dp,
                terminal.len()
            )));
        }
        let mut ys = vec![Vec::new(); levels + 1];
        let mut zs = vec![Vec::new(); levels];
        ys[levels] = terminal.to_vec();
        let mut buf = Vec::new();
        let mut fbuf = vec![0.0; dp];
        for off in (0..levels).rev() {
            let level = segment.start + off;
            let n = segment.nodes(off).len();
            let mut y = vec![0.0; n * dp];
            let mut z = vec![0.0; n * zd];
            let next = &ys[off + 1];
            for j in 0..n {
                let u = self.problem.controls.point(policy.control(off, j));
                let mut children = (0..segment.branching).map(|c| {
                    let ch = segment.child_local(off, j, c);
                    &next[ch * dp..(ch + 1) * dp]
                });
                self.step(
                    level,
                    segment.nodes(off)[j],
                    &mut children,
                    u,
                    &mut buf,
                    &mut fbuf,
                    &mut y[j * dp..(j + 1) * dp],
                    &mut z[j * zd..(j + 1) * zd],
                );
            }
            ys[off] = y;
            zs[off] = z;
        }
        Ok((ys, zs))
    }

    /// Terminal condition `xi` gathered onto the segment's last level.
    pub fn terminal_values(&self, segment: &Segment) -> Result<Vec<f64>> {
        if segment.end != self.tree.steps() {
            return Err(Error::InvalidArgument(
                "the terminal condition lives at the final level".into(),
            ));
        }
        let dp = self.problem.value_dim;
        let last = segment.nodes(segment.control_levels());
        let mut out = vec![0.0; last.len() * dp];
        let mut buf = Vec::new();
        for (j, &n) in last.iter().enumerate() {
            let ctx = self.tree.node_ctx(segment.end, n, &mut buf);
            self.problem.terminal(&ctx, &mut out[j * dp..(j + 1) * dp]);
        }
        Ok(out)
    }

    /// Optimizes `objective(start-level Y)` over all policies of `segment`.
    ///
    /// Enumerates exhaustively when the policy count is within `cap`.
    /// Otherwise, if `fallback` is set, runs coordinate ascent and marks the
    /// result heuristic; if not, returns [`Error::EnumerationCap`]. Ties go to
    /// the lexicographically smallest policy in canonical order.
    pub fn optimize(
        &self,
        segment: &Segment,
        terminal: &[f64],
        objective: &dyn Fn(&[f64]) -> f64,
        options: &SearchOptions,
    ) -> Result<SegmentOptimum> {
        let class = self.problem.class;
        let count = segment.policy_count(class, self.problem.controls.len());
        let mut cache = LevelCache::new(self, segment, terminal)?;
        if count <= options.cap as f64 {
            let mut best: Option<(f64, Vec<u32>, Vec<f64>)> = None;
            cache.for_each_policy(|digits, values| {
                let v = objective(values);
                let better = match &best {
                    None => true,
                    Some((bv, bd, _)) => match v.partial_cmp(bv) {
                        Some(Ordering::Greater) => true,
                        Some(Ordering::Equal) => digits < bd.as_slice(),
                        _ => bv.is_nan() && !v.is_nan(),
                    },
                };
                if better {
                    best = Some((v, digits.to_vec(), values.to_vec()));
                }
            });
            let (value, digits, start_values) = best.expect("at least one policy");
            Ok(SegmentOptimum {
                value,
                policy: Policy::from_digits(segment, class, &digits)?,
                start_values,
                exact: true,
                evaluated: count as u64,
            })
        } else if options.fallback {
            log::warn!(
                "{}: {count:.3e} policies exceed the cap {}; using coordinate ascent",
                self.problem.name,
                options.cap
            );
            cache.coordinate_ascent(objective, options.max_sweeps)
        } else {
            Err(Error::EnumerationCap { count, cap: options.cap })
        }
    }

    /// Start-level values of every policy of `segment` (canonical digits
    /// passed alongside). Fails above `cap`.
    pub fn for_each_policy(
        &self,
        segment: &Segment,
        terminal: &[f64],
        cap: u64,
        mut visit: impl FnMut(&[u32], &[f64]),
    ) -> Result<u64> {
        let count = segment.policy_count(self.problem.class, self.problem.controls.len());
        if count > cap as f64 {
            return Err(Error::EnumerationCap { count, cap });
        }
        let mut cache = LevelCache::new(self, segment, terminal)?;
        cache.for_each_policy(|d, v| visit(d, v));
        Ok(count as u64)
    }
}

/// Enumeration and fallback settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub cap: u64,
    pub fallback: bool,
    pub max_sweeps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_POLICY_CAP, fallback: true, max_sweeps: 50 }
    }
}

impl SearchOptions {
    pub fn exact_only(cap: u64) -> Self {
        Self { cap, fallback: false, ..Self::default() }
    }
}

/// Best policy found on a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptimum {
    pub value: f64,
    pub policy: Policy,
    /// Start-level Y under the best policy.
    pub start_values: Vec<f64>,
    /// `false` when coordinate ascent was used.
    pub exact: bool,
    pub evaluated: u64,
}

/// Y buffers for every segment level, recomputed only from the highest
/// changed level downwards.
struct LevelCache<'e, 'a> {
    engine: &'e Engine<'a>,
    segment: &'e Segment,
    ys: Vec<Vec<f64>>,
    digits: Vec<u32>,
    /// Level offset of each canonical coordinate.
    coord_level: Vec<usize>,
    buf: Vec<f64>,
    fbuf: Vec<f64>,
    zbuf: Vec<f64>,
}

impl<'e, 'a> LevelCache<'e, 'a> {
    fn new(engine: &'e Engine<'a>, segment: &'e Segment, terminal: &[f64]) -> Result<Self> {
        let dp = engine.problem.value_dim;
        let levels = segment.control_levels();
        if terminal.len() != segment.nodes(levels).len() * dp {
            return Err(Error::Dimension(format!(
                "terminal values: expected {}, got {}",
                segment.nodes(levels).len() * dp,
                terminal.len()
            )));
        }
        let class = engine.problem.class;
        let mut ys: Vec<Vec<f64>> =
            (0..levels).map(|off| vec![0.0; segment.nodes(off).len() * dp]).collect();
        ys.push(terminal.to_vec());
        let coord_level = (0..levels)
            .flat_map(|off| {
                let len = match class {
                    ControlClass::Adapted => segment.nodes(off).len(),
                    ControlClass::Deterministic => 1,
                };
                std::iter::repeat(off).take(len)
            })
            .collect::<Vec<_>>();
        let mut cache = Self {
            engine,
            segment,
            ys,
            digits: vec![0; coord_level.len()],
            coord_level,
            buf: Vec::new(),
            fbuf: vec![0.0; dp],
            zbuf: vec![0.0; dp * engine.tree.dim()],
        };
        if levels > 0 {
            cache.recompute(levels - 1);
        }
        Ok(cache)
    }

    /// Recomputes levels `from, from - 1, ..., 0` (offsets).
    fn recompute(&mut self, from: usize) {
        let dp = self.engine.problem.value_dim;
        let seg = self.segment;
        let first_coord = self.first_coords();
        for off in (0..=from).rev() {
            let level = seg.start + off;
            let (head, tail) = self.ys.split_at_mut(off + 1);
            let next = &tail[0];
            let cur = &mut head[off];
            for j in 0..seg.nodes(off).len() {
                let ui = match self.engine.problem.class {
                    ControlClass::Adapted => self.digits[first_coord[off] + j] as usize,
                    ControlClass::Deterministic => self.digits[off] as usize,
                };
                let u = self.engine.problem.controls.point(ui);
                let mut children = (0..seg.branching).map(|c| {
                    let ch = seg.child_local(off, j, c);
                    &next[ch * dp..(ch + 1) * dp]
                });
                self.engine.step(
                    level,
                    seg.nodes(off)[j],
                    &mut children,
                    u,
                    &mut self.buf,
                    &mut self.fbuf,
                    &mut cur[j * dp..(j + 1) * dp],
                    &mut self.zbuf,
                );
            }
        }
    }

    fn first_coords(&self) -> Vec<usize> {
        let mut first = Vec::with_capacity(self.segment.control_levels());
        let mut acc = 0;
        for off in 0..self.segment.control_levels() {
            first.push(acc);
            acc += match self.engine.problem.class {
                ControlClass::Adapted => self.segment.nodes(off).len(),
                ControlClass::Deterministic => 1,
            };
        }
        first
    }

    /// Visits every policy. Coordinates of the first level change fastest so
    /// that most steps only recompute the start level.
    fn for_each_policy(&mut self, mut visit: impl FnMut(&[u32], &[f64])) {
        let m = self.engine.problem.controls.len() as u32;
        let ncoord = self.digits.len();
        self.digits.iter_mut().for_each(|d| *d = 0);
        if ncoord > 0 {
            self.recompute(self.segment.control_levels() - 1);
        }
        loop {
            visit(&self.digits, &self.ys[0]);
            // odometer, coordinate 0 fastest
            let mut i = 0;
            loop {
                if i == ncoord {
                    return;
                }
                self.digits[i] += 1;
                if self.digits[i] < m {
                    break;
                }
                self.digits[i] = 0;
                i += 1;
            }
            self.recompute(self.coord_level[i]);
        }
    }

    fn coordinate_ascent(
        &mut self,
        objective: &dyn Fn(&[f64]) -> f64,
        max_sweeps: usize,
    ) -> Result<SegmentOptimum> {
        let m = self.engine.problem.controls.len() as u32;
        let ncoord = self.digits.len();
        self.digits.iter_mut().for_each(|d| *d = 0);
        if ncoord > 0 {
            self.recompute(self.segment.control_levels() - 1);
        }
        let mut best = objective(&self.ys[0]);
        let mut evaluated = 1u64;
        for _ in 0..max_sweeps {
            let mut improved = false;
            for i in 0..ncoord {
                let original = self.digits[i];
                let mut keep = original;
                for v in 0..m {
                    if v == original {
                        continue;
                    }
                    self.digits[i] = v;
                    self.recompute(self.coord_level[i]);
                    evaluated += 1;
                    let val = objective(&self.ys[0]);
                    if val > best {
                        best = val;
                        keep = v;
                    }
                }
                self.digits[i] = keep;
                self.recompute(self.coord_level[i]);
                improved |= keep != original;
            }
            if !improved {
                break;
            }
        }
        let class = self.engine.problem.class;
        Ok(SegmentOptimum {
            value: best,
            policy: Policy::from_digits(self.segment, class, &self.digits)?,
            start_values: self.ys[0].clone(),
            exact: false,
            evaluated,
        })
    }
}

fn to_full_level(
    tree: &ScenarioTree,
    level: usize,
    nodes: &[usize],
    dim: usize,
    local: &[f64],
) -> TreeRandomVariable {
    let mut values = vec![0.0; tree.level_len(level) * dim];
    for (j, &n) in nodes.iter().enumerate() {
        values[n * dim..(n + 1) * dim].copy_from_slice(&local[j * dim..(j + 1) * dim]);
    }
    TreeRandomVariable::new(level, dim, values)
}

/// Solves the BSDE on levels `0..=k` with terminal value `eta` at level `k`
/// under an adapted or deterministic `policy` of the full segment.
pub fn solve_bsde(
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    policy: &Policy,
    k: usize,
    eta: &TreeRandomVariable,
) -> Result<BsdeSolution> {
    let engine = Engine::new(problem, tree)?;
    let segment = Segment::full(tree, 0, k)?;
    if eta.dim != problem.value_dim {
        return Err(Error::Dimension(format!(
            "terminal value has dimension {}, problem expects {}",
            eta.dim, problem.value_dim
        )));
    }
    let terminal = segment.gather_terminal(eta)?;
    let (ys, zs) = engine.solve(&segment, policy, &terminal)?;
    let dp = problem.value_dim;
    let zd = dp * tree.dim();
    Ok(BsdeSolution {
        y: ys
            .iter()
            .enumerate()
            .map(|(off, y)| to_full_level(tree, off, segment.nodes(off), dp, y))
            .collect(),
        z: zs
            .iter()
            .enumerate()
            .map(|(off, z)| to_full_level(tree, off, segment.nodes(off), zd, z))
            .collect(),
    })
}

/// The terminal condition `xi` as a random variable at the final level.
pub fn terminal_variable(problem: &BsdeProblem, tree: &ScenarioTree) -> Result<TreeRandomVariable> {
    tree.random_variable(tree.steps(), problem.value_dim, |ctx, out| problem.terminal(ctx, out))
}

/// Static value `max_u phi(Y^u_0)` over all policies of the whole tree.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticValue {
    pub value: f64,
    pub y0: Vec<f64>,
    pub policy: Policy,
    /// `false` when the fallback heuristic produced the value.
    pub exact: bool,
    pub evaluated: u64,
}

pub fn static_value(
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    options: &SearchOptions,
) -> Result<StaticValue> {
    let engine = Engine::new(problem, tree)?;
    let segment = Segment::full(tree, 0, tree.steps())?;
    let terminal = engine.terminal_values(&segment)?;
    let opt = engine.optimize(&segment, &terminal, &|y| problem.utility(y), options)?;
    Ok(StaticValue {
        value: opt.value,
        y0: opt.start_values,
        policy: opt.policy,
        exact: opt.exact,
        evaluated: opt.evaluated,
    })
}

/// Finite set of values `Y^u_k(node)` reachable by policies on `[k, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachableSet {
    pub level: usize,
    pub node: usize,
    pub dim: usize,
    /// Distinct points, sorted lexicographically.
    pub points: Vec<Vec<f64>>,
    pub policies_evaluated: u64,
}

impl ReachableSet {
    /// Sup-norm distance from `y` to the set.
    pub fn distance(&self, y: &[f64]) -> f64 {
        self.points
            .iter()
            .map(|p| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Enumerates the reachable set at `(k, node)`; fails above `cap` policies.
pub fn reachable_set(
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    k: usize,
    node: usize,
    cap: u64,
) -> Result<ReachableSet> {
    let engine = Engine::new(problem, tree)?;
    reachable_set_with(&engine, k, node, cap)
}

pub(crate) fn reachable_set_with(
    engine: &Engine,
    k: usize,
    node: usize,
    cap: u64,
) -> Result<ReachableSet> {
    let tree = engine.tree();
    let segment = Segment::cone(tree, k, node, tree.steps())?;
    let terminal = engine.terminal_values(&segment)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    let evaluated = engine.for_each_policy(&segment, &terminal, cap, |_, y| {
        points.push(y.to_vec());
    })?;
    Ok(ReachableSet {
        level: k,
        node,
        dim: engine.problem().value_dim,
        points: dedup_points(points, REACHABLE_DEDUP_TOL),
        policies_evaluated: evaluated,
    })
}

/// Sorts points lexicographically and merges neighbours within `tol`.
pub fn dedup_points(mut points: Vec<Vec<f64>>, tol: f64) -> Vec<Vec<f64>> {
    points.sort_by(|a, b| lex_cmp(a, b));
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        let dup = out.iter().rev().take(64).any(|q| {
            q.iter().zip(&p).all(|(a, b)| (a - b).abs() <= tol)
        });
        if !dup {
            out.push(p);
        }
    }
    out
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Result of the envelope BSDE and its brute-force consistency check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// `Y-bar` at every level (node-major, `d'` values per node).
    pub envelope: Vec<Vec<f64>>,
    /// `max |V_t - phi(Y-bar_t)|` over checked nodes.
    pub max_residual: f64,
    /// Residual per level (`None` when enumeration exceeded the cap).
    pub level_residuals: Vec<Option<f64>>,
    /// Whether `phi` passed the monotonicity probes.
    pub utility_monotone: bool,
    /// Set when some checked node has residual above `tolerance`.
    pub dpp_violated: bool,
    pub tolerance: f64,
}

/// Solves the envelope BSDE with driver `max_u f_i` (componentwise) and
/// compares `phi(Y-bar_t)` with the brute-force value
/// `V_t = max_u phi(Y^u_t)` at every node whose cone is enumerable.
///
/// The driver must not let component `i` depend on `z_j` (`j != i`) and must
/// be nondecreasing in `y_j` (`j != i`); probe failures are a
/// [`Error::Structure`]. A non-monotone `phi` is reported, not rejected.
pub fn envelope_bsde(
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    cap: u64,
    tolerance: f64,
) -> Result<EnvelopeReport> {
    let engine = Engine::new(problem, tree)?;
    probe_envelope_structure(problem, tree)?;
    let utility_monotone = probe_monotone_utility(problem);
    let dp = problem.value_dim;
    let zd = dp * tree.dim();
    let n = tree.steps();
    let segment = Segment::full(tree, 0, n)?;
    let terminal = engine.terminal_values(&segment)?;

    // Backward pass with the componentwise maximal driver.
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = terminal;
    let mut buf = Vec::new();
    let (mut f, mut fbest) = (vec![0.0; dp], vec![0.0; dp]);
    let (mut m, mut z) = (vec![0.0; dp], vec![0.0; zd]);
    let incr = tree.increments();
    let b = tree.branching();
    for k in (0..n).rev() {
        let len = tree.level_len(k);
        let mut y = vec![0.0; len * dp];
        for node in 0..len {
            m.iter_mut().for_each(|v| *v = 0.0);
            z.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..b {
                let ch = tree.child(k, node, c);
                let yc = &levels[k + 1][ch * dp..(ch + 1) * dp];
                for i in 0..dp {
                    m[i] += yc[i];
                    for l in 0..tree.dim() {
                        z[i * tree.dim() + l] += yc[i] * incr[c * tree.dim() + l];
                    }
                }
            }
            m.iter_mut().for_each(|v| *v /= b as f64);
            z.iter_mut().for_each(|v| *v /= b as f64 * tree.dt());
            let ctx = tree.node_ctx(k, node, &mut buf);
            fbest.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
            for ui in 0..problem.controls.len() {
                problem.generator(&ctx, &m, &z, problem.controls.point(ui), &mut f);
                for (bst, fi) in fbest.iter_mut().zip(&f) {
                    *bst = bst.max(*fi);
                }
            }
            for i in 0..dp {
                y[node * dp + i] = m[i] + fbest[i] * tree.dt();
            }
        }
        levels[k] = y;
    }

    let mut level_residuals = Vec::with_capacity(n + 1);
    let mut max_residual: f64 = 0.0;
    for k in 0..=n {
        let mut worst: Option<f64> = Some(0.0);
        for node in 0..tree.level_len(k) {
            let bar = problem.utility(&levels[k][node * dp..(node + 1) * dp]);
            let seg = Segment::cone(tree, k, node, n)?;
            let term = engine.terminal_values(&seg)?;
            match engine.optimize(&seg, &term, &|y| problem.utility(y), &SearchOptions::exact_only(cap)) {
                Ok(opt) => {
                    let r = (opt.value - bar).abs();
                    worst = worst.map(|w| w.max(r));
                }
                Err(Error::EnumerationCap { .. }) => {
                    worst = None;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(w) = worst {
            max_residual = max_residual.max(w);
        }
        level_residuals.push(worst);
    }
    Ok(EnvelopeReport {
        envelope: levels,
        max_residual,
        level_residuals,
        utility_monotone,
        dpp_violated: max_residual > tolerance,
        tolerance,
    })
}

fn probe_envelope_structure(problem: &BsdeProblem, tree: &ScenarioTree) -> Result<()> {
    let (dp, d) = (problem.value_dim, tree.dim());
    if dp == 1 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xe4e1_09e5);
    let mut buf = Vec::new();
    let (mut f0, mut f1) = (vec![0.0; dp], vec![0.0; dp]);
    for _ in 0..128 {
        let k = rng.gen_range(0..tree.steps());
        let node = rng.gen_range(0..tree.level_len(k));
        let u = problem.controls.point(rng.gen_range(0..problem.controls.len()));
        let y: Vec<f64> = (0..dp).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..dp * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ctx = tree.node_ctx(k, node, &mut buf);
        problem.generator(&ctx, &y, &z, u, &mut f0);
        let j = rng.gen_range(0..dp);
        let mut y1 = y.clone();
        y1[j] += rng.gen_range(0.01..1.0);
        problem.generator(&ctx, &y1, &z, u, &mut f1);
        for i in (0..dp).filter(|&i| i != j) {
            if f1[i] < f0[i] - 1e-12 {
                return Err(Error::Structure(format!(
                    "component {i} of the driver decreases in y_{j}"
                )));
            }
        }
        let mut z1 = z.clone();
        for l in 0..d {
            z1[j * d + l] += rng.gen_range(-1.0..1.0);
        }
        problem.generator(&ctx, &y, &z1, u, &mut f1);
        for i in (0..dp).filter(|&i| i != j) {
            if (f1[i] - f0[i]).abs() > 1e-12 {
                return Err(Error::Structure(format!(
                    "component {i} of the driver depends on z_{j}"
                )));
            }
        }
    }
    Ok(())
}

fn probe_monotone_utility(problem: &BsdeProblem) -> bool {
    let dp = problem.value_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a11_0e5e);
    (0..128).all(|_| {
        let y: Vec<f64> = (0..dp).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut y1 = y.clone();
        y1[rng.gen_range(0..dp)] += rng.gen_range(0.01..1.0);
        problem.utility(&y1) >= problem.utility(&y) - 1e-12
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TimeGrid;

    fn tree(n: usize, horizon: f64, mode: TreeMode) -> ScenarioTree {
        ScenarioTree::new(TimeGrid::new(horizon, n).unwrap(), 1, mode).unwrap()
    }

    fn zero_driver_bm_terminal() -> BsdeProblem {
        BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[0.0]).unwrap(),
            0.0,
            |_, _, _, _, out| out[0] = 0.0,
            |ctx, out| out[0] = ctx.brownian[0],
            |y| y[0],
        )
    }

    #[test]
    fn zero_driver_martingale_representation() {
        let t = tree(4, 1.0, TreeMode::Path);
        let p = zero_driver_bm_terminal();
        let seg = Segment::full(&t, 0, 4).unwrap();
        let pol = Policy::constant(&seg, ControlClass::Adapted, 0);
        let xi = terminal_variable(&p, &t).unwrap();
        let sol = solve_bsde(&p, &t, &pol, 4, &xi).unwrap();
        for k in 0..4 {
            for node in 0..t.level_len(k) {
                assert!((sol.y[k].node(node)[0] - t.brownian(k, node)[0]).abs() < 1e-14);
                assert!((sol.z[k].node(node)[0] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_understated_lipschitz_constant() {
        let t = tree(3, 1.0, TreeMode::Path);
        let p = zero_driver_bm_terminal().with_generator(|_, y, _, _, out| out[0] = 3.0 * y[0], 1.0);
        assert!(matches!(p.validate(&t), Err(Error::ProblemValidation(_))));
    }

    #[test]
    fn cap_without_fallback_is_an_error() {
        let t = tree(4, 1.0, TreeMode::Path);
        let p = zero_driver_bm_terminal();
        let p = BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap(),
            0.0,
            |_, _, _, u, out| out[0] = u[0],
            |ctx, out| out[0] = ctx.brownian[0],
            |y| -y[0].abs(),
        )
        .named(p.name().to_string());
        let err = static_value(&p, &t, &SearchOptions::exact_only(1000)).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { .. }));
        let heuristic = static_value(&p, &t, &SearchOptions { cap: 1000, ..Default::default() })
            .unwrap();
        assert!(!heuristic.exact);
    }

    #[test]
    fn ties_pick_lexicographically_smallest_policy() {
        let t = tree(2, 1.0, TreeMode::Path);
        // phi ignores y: every policy ties.
        let p = BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[0.0, 1.0]).unwrap(),
            0.0,
            |_, _, _, u, out| out[0] = u[0],
            |_, out| out[0] = 0.0,
            |_| 1.0,
        );
        let v = static_value(&p, &t, &SearchOptions::default()).unwrap();
        assert!(v.policy.digits().iter().all(|&d| d == 0));
    }

    #[test]
    fn reachable_set_of_control_sum() {
        // f = u, xi = 0, deterministic controls on a 3-step grid: Y_0 = dt * sum u.
        let t = tree(3, 3.0, TreeMode::Recombining);
        let p = BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[0.0, 1.0]).unwrap(),
            0.0,
            |_, _, _, u, out| out[0] = u[0],
            |_, out| out[0] = 0.0,
            |y| y[0],
        )
        .with_class(ControlClass::Deterministic);
        let r = reachable_set(&p, &t, 0, 0, 1000).unwrap();
        let pts: Vec<f64> = r.points.iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(r.policies_evaluated, 8);
    }

    #[test]
    fn envelope_matches_brute_force_for_abs_z() {
        let t = tree(3, 1.0, TreeMode::Path);
        let p = BsdeProblem::new(
            1,
            1,
            ControlSet::scalar(&[-1.0, 1.0]).unwrap(),
            1.0,
            |_, _, z, u, out| out[0] = u[0] * z[0],
            |ctx, out| out[0] = ctx.brownian[0].abs(),
            |y| y[0],
        );
        let rep = envelope_bsde(&p, &t, 1_000_000, 1e-10).unwrap();
        assert!(rep.max_residual <= 1e-10, "{}", rep.max_residual);
        assert!(!rep.dpp_violated && rep.utility_monotone);
        let dec = p.with_utility(|y| -y[0]);
        let rep = envelope_bsde(&dec, &t, 1_000_000, 1e-10).unwrap();
        assert!(!rep.utility_monotone);
        assert!(rep.dpp_violated);
    }
}
