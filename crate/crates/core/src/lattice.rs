//! Symmetric binomial scenario trees for a d-dimensional Brownian motion.
//!
//! Every coordinate moves by `±sqrt(dt)` per step with probability 1/2, and
//! the coordinates move independently, so each node has `2^d` equally likely
//! children. Two layouts are available:
//!
//! * [`TreeMode::Path`] keeps one node per path. Node `i` at level `k` has
//!   children `i * 2^d + c`, so levels are ordered lexicographically in the
//!   step signs (`-` before `+`, coordinate 0 most significant). Path-dependent
//!   functionals need this layout; its size is capped at `steps * d <= 22`.
//! * [`TreeMode::Recombining`] identifies a node by its per-coordinate
//!   up-move counts, written in mixed radix `k + 1` with coordinate 0 most
//!   significant.
//!
//! Conditional expectations are always computed by iterated one-step
//! averaging (sum of the `2^d` children, scaled by `2^-d`), which makes the
//! tower property hold bit for bit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Largest `steps * dim` accepted for path-mode trees.
pub const PATH_MODE_CAP: usize = 22;

/// Uniform time grid `t_k = k * horizon / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        ensure(horizon.is_finite() && horizon > 0.0, || {
            format!("horizon must be positive and finite, got {horizon}")
        })?;
        ensure(steps >= 1, || "a time grid needs at least one step".into())?;
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of level `k`; exact at `k == steps`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// All grid times `t_0, ..., t_n`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    Recombining,
    Path,
}

/// A recombining or non-recombining binomial tree.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    dim: usize,
    mode: TreeMode,
    sqrt_dt: f64,
    sizes: Vec<usize>,
    /// Path mode: bit mask selecting the up-move bits of each coordinate.
    masks: Vec<usize>,
}

impl ScenarioTree {
    pub fn new(grid: TimeGrid, dim: usize, mode: TreeMode) -> Result<Self> {
        Self::with_path_cap(grid, dim, mode, PATH_MODE_CAP)
    }

    /// Like [`ScenarioTree::new`] with a tighter path-mode cap (never looser
    /// than [`PATH_MODE_CAP`]).
    pub fn with_path_cap(grid: TimeGrid, dim: usize, mode: TreeMode, cap: usize) -> Result<Self> {
        ensure(dim >= 1, || "noise dimension must be at least 1".into())?;
        let n = grid.steps();
        let sizes: Vec<usize> = match mode {
            TreeMode::Path => {
                let cap = cap.min(PATH_MODE_CAP);
                if n * dim > cap {
                    return Err(Error::TreeTooLarge { steps: n, dim, cap });
                }
                (0..=n).map(|k| 1usize << (k * dim)).collect()
            }
            TreeMode::Recombining => {
                let mut sizes = Vec::with_capacity(n + 1);
                for k in 0..=n {
                    let len = (k + 1)
                        .checked_pow(dim as u32)
                        .filter(|&l| l <= 1 << 28)
                        .ok_or(Error::TreeTooLarge { steps: n, dim, cap: 1 << 28 })?;
                    sizes.push(len);
                }
                sizes
            }
        };
        let masks = match mode {
            TreeMode::Path => (0..dim)
                .map(|l| {
                    (0..n).fold(0usize, |m, j| m | (1usize << (j * dim + dim - 1 - l)))
                })
                .collect(),
            TreeMode::Recombining => Vec::new(),
        };
        Ok(Self { grid, dim, mode, sqrt_dt: grid.dt().sqrt(), sizes, masks })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> TreeMode {
        self.mode
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    /// Number of children of every non-terminal node.
    pub fn branching(&self) -> usize {
        1 << self.dim
    }

    pub fn level_len(&self, k: usize) -> usize {
        self.sizes[k]
    }

    /// Total number of nodes over all levels.
    pub fn node_count(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn check_level(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            Err(Error::LevelOutOfRange { level: k, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn check_node(&self, k: usize, node: usize) -> Result<()> {
        self.check_level(k)?;
        if node >= self.sizes[k] {
            Err(Error::NodeOutOfRange { level: k, node, len: self.sizes[k] })
        } else {
            Ok(())
        }
    }

    /// Up-move indicator of coordinate `l` in child slot `c`.
    #[inline]
    fn child_bit(&self, c: usize, l: usize) -> usize {
        (c >> (self.dim - 1 - l)) & 1
    }

    /// Brownian increment taken when moving to child slot `c`.
    pub fn increment_into(&self, c: usize, out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = if self.child_bit(c, l) == 1 { self.sqrt_dt } else { -self.sqrt_dt };
        }
    }

    /// Increments of all child slots, child-major (`2^d * d` values).
    pub fn increments(&self) -> Vec<f64> {
        let b = self.branching();
        let mut out = vec![0.0; b * self.dim];
        for c in 0..b {
            self.increment_into(c, &mut out[c * self.dim..(c + 1) * self.dim]);
        }
        out
    }

    /// Index of child `c` of `node` at level `k` (a node of level `k + 1`).
    #[inline]
    pub fn child(&self, k: usize, node: usize, c: usize) -> usize {
        match self.mode {
            TreeMode::Path => (node << self.dim) | c,
            TreeMode::Recombining => {
                let (r, rn) = (k + 1, k + 2);
                let mut rest = node;
                let mut out = 0;
                let mut scale = 1;
                for l in (0..self.dim).rev() {
                    let count = rest % r;
                    rest /= r;
                    out += (count + self.child_bit(c, l)) * scale;
                    scale *= rn;
                }
                out
            }
        }
    }

    /// Per-coordinate up-move counts of a node.
    pub fn up_counts(&self, k: usize, node: usize) -> Vec<usize> {
        match self.mode {
            TreeMode::Path => self.masks.iter().map(|m| (node & m).count_ones() as usize).collect(),
            TreeMode::Recombining => {
                let r = k + 1;
                let mut rest = node;
                let mut counts = vec![0; self.dim];
                for l in (0..self.dim).rev() {
                    counts[l] = rest % r;
                    rest /= r;
                }
                counts
            }
        }
    }

    /// Brownian position `B_{t_k}` at a node.
    pub fn brownian_into(&self, k: usize, node: usize, out: &mut [f64]) {
        match self.mode {
            TreeMode::Path => {
                for (l, o) in out.iter_mut().enumerate().take(self.dim) {
                    let ups = (node & self.masks[l]).count_ones() as f64;
                    *o = self.sqrt_dt * (2.0 * ups - k as f64);
                }
            }
            TreeMode::Recombining => {
                let r = k + 1;
                let mut rest = node;
                for l in (0..self.dim).rev() {
                    let ups = (rest % r) as f64;
                    rest /= r;
                    out[l] = self.sqrt_dt * (2.0 * ups - k as f64);
                }
            }
        }
    }

    pub fn brownian(&self, k: usize, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.brownian_into(k, node, &mut out);
        out
    }

    /// Unconditional probability of every node at level `k`.
    pub fn probabilities(&self, k: usize) -> Vec<f64> {
        match self.mode {
            TreeMode::Path => vec![(-((k * self.dim) as f64)).exp2(); self.sizes[k]],
            TreeMode::Recombining => {
                let row = binomial_row(k);
                (0..self.sizes[k])
                    .map(|node| {
                        self.up_counts(k, node).iter().map(|&j| row[j]).product::<f64>()
                    })
                    .collect()
            }
        }
    }

    /// Context handed to user callbacks for one node.
    pub fn node_ctx<'a>(&'a self, k: usize, node: usize, buf: &'a mut Vec<f64>) -> NodeCtx<'a> {
        buf.resize(self.dim, 0.0);
        self.brownian_into(k, node, buf);
        NodeCtx { level: k, index: node, time: self.time(k), brownian: buf, tree: Some(self) }
    }

    /// Builds a random variable at level `k` by evaluating `f` at every node.
    pub fn random_variable<F>(&self, k: usize, dim: usize, f: F) -> Result<TreeRandomVariable>
    where
        F: Fn(&NodeCtx, &mut [f64]),
    {
        self.check_level(k)?;
        let mut values = vec![0.0; self.sizes[k] * dim];
        let mut buf = Vec::new();
        for (node, out) in values.chunks_mut(dim).enumerate() {
            let ctx = self.node_ctx(k, node, &mut buf);
            f(&ctx, out);
        }
        Ok(TreeRandomVariable { level: k, dim, values })
    }

    /// One-step average of a level-`k+1` array (`dim` values per node).
    pub fn average_step(&self, k: usize, next: &[f64], dim: usize) -> Vec<f64> {
        let b = self.branching();
        let scale = (-(self.dim as f64)).exp2();
        let mut out = vec![0.0; self.sizes[k] * dim];
        for node in 0..self.sizes[k] {
            let acc = &mut out[node * dim..(node + 1) * dim];
            for c in 0..b {
                let ch = self.child(k, node, c);
                for (a, v) in acc.iter_mut().zip(&next[ch * dim..(ch + 1) * dim]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        out
    }

    /// `E[rv | F_{t_k}]` by iterated one-step averaging.
    pub fn conditional_expectation(
        &self,
        rv: &TreeRandomVariable,
        k: usize,
    ) -> Result<TreeRandomVariable> {
        self.check_level(rv.level)?;
        if k > rv.level {
            return Err(Error::InvalidArgument(format!(
                "cannot condition a level-{} variable on the later level {k}",
                rv.level
            )));
        }
        if rv.values.len() != self.sizes[rv.level] * rv.dim {
            return Err(Error::Dimension(format!(
                "random variable has {} values, level {} expects {}",
                rv.values.len(),
                rv.level,
                self.sizes[rv.level] * rv.dim
            )));
        }
        let mut values = rv.values.clone();
        for j in (k..rv.level).rev() {
            values = self.average_step(j, &values, rv.dim);
        }
        Ok(TreeRandomVariable { level: k, dim: rv.dim, values })
    }

    /// `E[rv]`.
    pub fn expectation(&self, rv: &TreeRandomVariable) -> Result<Vec<f64>> {
        Ok(self.conditional_expectation(rv, 0)?.values)
    }

    /// The Brownian path leading to a node. Path mode only.
    pub fn path(&self, k: usize, node: usize) -> Result<Path> {
        if self.mode != TreeMode::Path {
            return Err(Error::PathModeRequired);
        }
        self.check_node(k, node)?;
        let d = self.dim;
        let mut points = vec![0.0; (k + 1) * d];
        for j in 1..=k {
            let ancestor = node >> ((k - j) * d);
            self.brownian_into(j, ancestor, &mut points[j * d..(j + 1) * d]);
        }
        Ok(Path { dt: self.dt(), dim: d, points })
    }
}

/// Probabilities of `j` up-moves out of `k` fair coin flips.
pub fn binomial_row(k: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..k {
        let mut next = vec![0.0; row.len() + 1];
        for (j, p) in row.iter().enumerate() {
            next[j] += 0.5 * p;
            next[j + 1] += 0.5 * p;
        }
        row = next;
    }
    row
}

/// Per-node context passed to generators, terminal conditions and functionals.
#[derive(Debug, Clone, Copy)]
pub struct NodeCtx<'a> {
    pub level: usize,
    pub index: usize,
    pub time: f64,
    pub brownian: &'a [f64],
    tree: Option<&'a ScenarioTree>,
}

impl<'a> NodeCtx<'a> {
    /// A context not attached to any tree (deterministic problems, HJB grids).
    pub fn detached(level: usize, time: f64, brownian: &'a [f64]) -> Self {
        Self { level, index: 0, time, brownian, tree: None }
    }

    pub fn tree(&self) -> Option<&'a ScenarioTree> {
        self.tree
    }

    /// Path leading to this node; fails unless attached to a path-mode tree.
    pub fn path(&self) -> Result<Path> {
        self.tree.ok_or(Error::PathModeRequired)?.path(self.level, self.index)
    }
}

/// A discretely observed Brownian path `B_{t_0}, ..., B_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    dt: f64,
    dim: usize,
    points: Vec<f64>,
}

impl Path {
    pub fn new(dt: f64, dim: usize, points: Vec<f64>) -> Result<Self> {
        ensure(dim >= 1 && !points.is_empty() && points.len() % dim == 0, || {
            format!("path with {} values is not a multiple of dim {dim}", points.len())
        })?;
        Ok(Self { dt, dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index of the last observation.
    pub fn level(&self) -> usize {
        self.points.len() / self.dim - 1
    }

    pub fn time(&self) -> f64 {
        self.level() as f64 * self.dt
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.point(self.level())
    }

    /// Left-endpoint Riemann sum of coordinate `l`.
    pub fn integral(&self, l: usize) -> f64 {
        (0..self.level()).map(|j| self.point(j)[l]).sum::<f64>() * self.dt
    }

    pub fn running_max(&self, l: usize) -> f64 {
        (0..=self.level()).map(|j| self.point(j)[l]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn running_min(&self, l: usize) -> f64 {
        (0..=self.level()).map(|j| self.point(j)[l]).fold(f64::INFINITY, f64::min)
    }

    /// The same horizon with the path frozen after observation `j`.
    pub fn stopped(&self, j: usize) -> Path {
        let mut points = self.points.clone();
        let frozen = self.point(j).to_vec();
        for i in j + 1..=self.level() {
            points[i * self.dim..(i + 1) * self.dim].copy_from_slice(&frozen);
        }
        Path { dt: self.dt, dim: self.dim, points }
    }

    /// Path truncated after observation `j`.
    pub fn truncated(&self, j: usize) -> Path {
        Path { dt: self.dt, dim: self.dim, points: self.points[..(j + 1) * self.dim].to_vec() }
    }

    /// Path extended by one increment.
    pub fn extended(&self, increment: &[f64]) -> Path {
        let mut points = self.points.clone();
        let last = self.terminal().to_vec();
        points.extend(last.iter().zip(increment).map(|(a, b)| a + b));
        Path { dt: self.dt, dim: self.dim, points }
    }
}

/// A square-integrable random variable at one level of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRandomVariable {
    pub level: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TreeRandomVariable {
    pub fn new(level: usize, dim: usize, values: Vec<f64>) -> Self {
        Self { level, dim, values }
    }

    pub fn constant(tree: &ScenarioTree, level: usize, value: &[f64]) -> Self {
        let values = value.iter().copied().cycle().take(tree.level_len(level) * value.len()).collect();
        Self { level, dim: value.len(), values }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Squared `L^2` norm under the tree measure.
    pub fn norm_sq(&self, tree: &ScenarioTree) -> f64 {
        let p = tree.probabilities(self.level);
        (0..self.len()).map(|i| p[i] * self.node(i).iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn distance(&self, other: &Self, tree: &ScenarioTree) -> f64 {
        let diff = Self {
            level: self.level,
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        };
        diff.norm_sq(tree).sqrt()
    }
}

/// A scalar functional of the Brownian path, evaluated at a node.
#[derive(Clone)]
pub enum Functional {
    /// Depends on `(t, B_t)` only; works on both tree layouts.
    Markov(Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>),
    /// Depends on the whole path; needs a path-mode tree.
    PathDependent(Arc<dyn Fn(&Path) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Functional::Markov(_) => f.write_str("Functional::Markov"),
            Functional::PathDependent(_) => f.write_str("Functional::PathDependent"),
        }
    }
}

/// Evaluates a functional at a node.
pub fn path_functional(
    tree: &ScenarioTree,
    k: usize,
    node: usize,
    functional: &Functional,
) -> Result<f64> {
    tree.check_node(k, node)?;
    match functional {
        Functional::Markov(f) => Ok(f(tree.time(k), &tree.brownian(k, node))),
        Functional::PathDependent(f) => Ok(f(&tree.path(k, node)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(n: usize, d: usize, mode: TreeMode) -> ScenarioTree {
        ScenarioTree::new(TimeGrid::new(1.0, n).unwrap(), d, mode).unwrap()
    }

    #[test]
    fn path_mode_is_capped() {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        assert!(matches!(
            ScenarioTree::new(grid, 2, TreeMode::Path),
            Err(Error::TreeTooLarge { .. })
        ));
        assert!(ScenarioTree::new(grid, 1, TreeMode::Path).is_ok());
    }

    #[test]
    fn children_are_sign_lexicographic() {
        let t = tree(3, 2, TreeMode::Path);
        // child 0 is (-,-), child 3 is (+,+); coordinate 0 is the high bit.
        assert_eq!(t.brownian(1, 0), vec![-t.sqrt_dt(), -t.sqrt_dt()]);
        assert_eq!(t.brownian(1, 2), vec![t.sqrt_dt(), -t.sqrt_dt()]);
        assert_eq!(t.brownian(1, 3), vec![t.sqrt_dt(), t.sqrt_dt()]);
    }

    #[test]
    fn recombining_children_add_counts() {
        let t = tree(4, 2, TreeMode::Recombining);
        let node = 1 * 3 + 2; // counts (1, 2) at level 2
        assert_eq!(t.up_counts(2, node), vec![1, 2]);
        let ch = t.child(2, node, 2); // (+, -)
        assert_eq!(t.up_counts(3, ch), vec![2, 2]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for mode in [TreeMode::Path, TreeMode::Recombining] {
            let t = tree(5, 2, mode);
            for k in 0..=5 {
                let s: f64 = t.probabilities(k).iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn path_matches_node_positions() {
        let t = tree(4, 1, TreeMode::Path);
        let p = t.path(4, 0b1011).unwrap();
        for j in 0..=4 {
            assert_eq!(p.point(j), t.brownian(j, 0b1011 >> (4 - j)).as_slice());
        }
        assert_eq!(t.path(4, 0).unwrap().running_min(0), -4.0 * t.sqrt_dt());
    }

    #[test]
    fn recombining_rejects_paths() {
        let t = tree(3, 1, TreeMode::Recombining);
        let f = Functional::PathDependent(Arc::new(|p: &Path| p.running_max(0)));
        assert_eq!(path_functional(&t, 3, 0, &f), Err(Error::PathModeRequired));
    }
}
