//! The dual target problem.
//!
//! For a target `y` at time `t`, the dual value is
//!
//! ```text
//! W(t, x, y) = inf_{Z, u} E | X_T - g(B_T) |^2,   X_t = y,
//! dX = -f(s, B_s, X, Z, u) ds + Z dB,
//! ```
//!
//! and `y` is reachable by the controlled BSDE exactly when `W = 0`. The
//! module offers two evaluations of `W`:
//!
//! * [`solve_dual_hjb`] marches the HJB equation
//!   `W_t + W_xx/2 + inf_{z,u} { z z^T : W_yy / 2 + z . W_xy - f . W_y } = 0`
//!   backwards on a rectangular `(x, y)` grid with upwinded transport
//!   (second-order ENO by default) and SSP-RK3 time stepping;
//! * [`DirectDual`] evaluates the minimum over a finite `z` grid and the
//!   control set exactly on a scenario tree, stepping `X` with the exact
//!   inverse of the explicit backward scheme, so reachable targets give
//!   `W = 0` up to rounding.
//!
//! Nodal sets `{W <= eps}` approximate reachable sets; the static value is
//! then recovered as the maximum of the utility over the nodal set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeProblem, ControlClass, ControlSet, UtilityFn};
use crate::error::{Error, Result};
use crate::lattice::{NodeCtx, ScenarioTree};

/// Driver `f(t, x, y, z, u, out)` of a Markovian problem with scalar noise.
pub type MarkovGeneratorFn = dyn Fn(f64, f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// Terminal map `g(x, out)`.
pub type MarkovTerminalFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

/// A controlled BSDE driven by one Brownian motion whose data depend on the
/// path only through `x = B_t`.
#[derive(Clone)]
pub struct MarkovProblem {
    value_dim: usize,
    controls: ControlSet,
    lipschitz: f64,
    generator: Arc<MarkovGeneratorFn>,
    terminal: Arc<MarkovTerminalFn>,
    utility: Arc<UtilityFn>,
    x_dependent: bool,
    class: ControlClass,
}

impl std::fmt::Debug for MarkovProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovProblem")
            .field("value_dim", &self.value_dim)
            .field("controls", &self.controls)
            .field("x_dependent", &self.x_dependent)
            .finish()
    }
}

impl MarkovProblem {
    pub fn new<G, T, U>(
        value_dim: usize,
        controls: ControlSet,
        lipschitz: f64,
        generator: G,
        terminal: T,
        utility: U,
    ) -> Self
    where
        G: Fn(f64, f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        T: Fn(f64, &mut [f64]) + Send + Sync + 'static,
        U: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            value_dim,
            controls,
            lipschitz,
            generator: Arc::new(generator),
            terminal: Arc::new(terminal),
            utility: Arc::new(utility),
            x_dependent: true,
            class: ControlClass::Adapted,
        }
    }

    /// Declares that neither driver nor terminal map depend on `x`, which
    /// allows a single-point `x` axis in the HJB grid.
    pub fn x_independent(mut self) -> Self {
        self.x_dependent = false;
        self
    }

    pub fn with_class(mut self, class: ControlClass) -> Self {
        self.class = class;
        self
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn is_x_dependent(&self) -> bool {
        self.x_dependent
    }

    #[inline]
    pub fn generator(&self, t: f64, x: f64, y: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        (self.generator)(t, x, y, z, u, out)
    }

    #[inline]
    pub fn terminal(&self, x: f64, out: &mut [f64]) {
        (self.terminal)(x, out)
    }

    pub fn utility(&self, y: &[f64]) -> f64 {
        (self.utility)(y)
    }

    /// The same problem as a tree BSDE with `x = B_t`.
    pub fn to_bsde(&self) -> BsdeProblem {
        let g = self.generator.clone();
        let term = self.terminal.clone();
        let util = self.utility.clone();
        BsdeProblem::new(
            self.value_dim,
            1,
            self.controls.clone(),
            self.lipschitz,
            move |ctx: &NodeCtx, y, z, u, out| g(ctx.time, ctx.brownian[0], y, z, u, out),
            move |ctx: &NodeCtx, out| term(ctx.brownian[0], out),
            move |y| util(y),
        )
        .with_class(self.class)
    }
}

/// A uniform axis with `n` points on `[lo, hi]`; `n == 1` is a single point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(lo.is_finite() && hi.is_finite()) || (n > 1 && !(hi > lo)) {
            return Err(Error::InvalidArgument(format!("invalid axis [{lo}, {hi}] with {n} points")));
        }
        Ok(Self { lo, hi, n })
    }

    /// Axis through `lo` with spacing close to `h` that covers `hi`.
    pub fn with_spacing(lo: f64, hi: f64, h: f64) -> Result<Self> {
        let cells = ((hi - lo) / h - 1e-9).ceil().max(1.0) as usize;
        Self::new(lo, lo + cells as f64 * h, cells + 1)
    }

    pub fn point(lo: f64) -> Self {
        Self { lo, hi: lo, n: 1 }
    }

    pub fn spacing(&self) -> f64 {
        if self.n > 1 {
            (self.hi - self.lo) / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.spacing() * i as f64
        }
    }

    pub fn is_active(&self) -> bool {
        self.n > 1
    }

    /// Whether index `i` lies at least `margin * (hi - lo)` inside.
    pub fn is_trusted(&self, i: usize, margin: f64) -> bool {
        if !self.is_active() {
            return true;
        }
        let v = self.value(i);
        let pad = margin * (self.hi - self.lo);
        v >= self.lo + pad - 1e-12 && v <= self.hi - pad + 1e-12
    }
}

/// Stencil for the transport term `-f . W_y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpwindScheme {
    FirstOrder,
    /// Second-order essentially non-oscillatory one-sided differences.
    Eno2,
}

/// Grid and time-stepping configuration of the HJB solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbConfig {
    pub horizon: f64,
    /// Number of saved time levels (slices at `t_k = k * horizon / levels`).
    pub levels: usize,
    /// Explicit steps between consecutive saved levels.
    pub substeps: usize,
    pub x_axis: Axis,
    pub y_axes: Vec<Axis>,
    /// Candidate `z` values, `d'` numbers each.
    pub z_grid: Vec<f64>,
    pub scheme: UpwindScheme,
    pub cfl: f64,
    /// Relative width of the untrusted band along every active axis.
    pub trusted_margin: f64,
}

impl HjbConfig {
    pub fn new(horizon: f64, levels: usize, x_axis: Axis, y_axes: Vec<Axis>, z_grid: Vec<f64>) -> Self {
        Self {
            horizon,
            levels,
            substeps: 1,
            x_axis,
            y_axes,
            z_grid,
            scheme: UpwindScheme::Eno2,
            cfl: 0.5,
            trusted_margin: 0.2,
        }
    }

    fn grid(&self) -> Grid {
        Grid::new(self.x_axis, &self.y_axes)
    }

    fn validate(&self, problem: &MarkovProblem) -> Result<()> {
        let dp = problem.value_dim;
        if !(1..=2).contains(&dp) || self.y_axes.len() != dp {
            return Err(Error::Dimension(format!(
                "HJB grid supports 1 or 2 value dimensions with one axis each; got d' = {dp} and {} axes",
                self.y_axes.len()
            )));
        }
        if self.z_grid.is_empty() || self.z_grid.len() % dp != 0 {
            return Err(Error::InvalidArgument("z grid must hold d' values per candidate".into()));
        }
        if self.levels == 0 || self.substeps == 0 || !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("HJB needs a positive horizon, levels and substeps".into()));
        }
        if !self.x_axis.is_active() && problem.x_dependent {
            return Err(Error::InvalidArgument(
                "a single-point x axis requires an x-independent problem".into(),
            ));
        }
        for a in std::iter::once(&self.x_axis).chain(&self.y_axes) {
            if a.is_active() && a.n < 4 {
                return Err(Error::InvalidArgument(format!(
                    "active axes need at least 4 points, got {}",
                    a.n
                )));
            }
        }
        if !self.y_axes.iter().all(Axis::is_active) {
            return Err(Error::InvalidArgument("y axes must have at least 4 points".into()));
        }
        if !(0.0..0.5).contains(&self.trusted_margin) {
            return Err(Error::InvalidArgument("trusted margin must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Largest explicit step satisfying the CFL bound `cfl / lambda`.
    pub fn max_stable_dt(&self, problem: &MarkovProblem) -> f64 {
        let grid = self.grid();
        let dp = problem.value_dim;
        let hy: Vec<f64> = self.y_axes.iter().map(Axis::spacing).collect();
        let hx = self.x_axis.spacing();
        let mut lambda: f64 = 0.0;
        let mut f = vec![0.0; dp];
        let mut y = vec![0.0; dp];
        let times = [0.0, 0.5 * self.horizon, self.horizon];
        for z in self.z_grid.chunks_exact(dp) {
            let mut diff = 0.0;
            for i in 0..dp {
                for j in 0..dp {
                    diff += 0.5 * (z[i] * z[j]).abs() / (hy[i] * hy[j]) * 2.0;
                }
                if self.x_axis.is_active() {
                    diff += z[i].abs() / (hx * hy[i]);
                }
            }
            if self.x_axis.is_active() {
                diff += 1.0 / (hx * hx);
            }
            for p in 0..grid.len {
                let x = grid.coords(p, &mut y);
                for &t in &times {
                    for ui in 0..problem.controls.len() {
                        problem.generator(t, x, &y, z, problem.controls.point(ui), &mut f);
                        let adv: f64 = f.iter().zip(&hy).map(|(fi, h)| fi.abs() / h).sum();
                        lambda = lambda.max(adv + diff);
                    }
                }
            }
        }
        if lambda == 0.0 {
            f64::INFINITY
        } else {
            self.cfl / lambda
        }
    }

    /// Smallest number of substeps per level that satisfies the CFL bound.
    pub fn stable_substeps(&self, problem: &MarkovProblem) -> usize {
        let level_dt = self.horizon / self.levels as f64;
        (level_dt / self.max_stable_dt(problem)).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone)]
struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    fn new(x: Axis, ys: &[Axis]) -> Self {
        let axes: Vec<Axis> = std::iter::once(x).chain(ys.iter().copied()).collect();
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len() - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].n;
        }
        let len = axes.iter().map(|a| a.n).product();
        Self { axes, strides, len }
    }

    #[inline]
    fn index_on(&self, p: usize, a: usize) -> usize {
        (p / self.strides[a]) % self.axes[a].n
    }

    /// Writes the y coordinates of point `p` and returns its x coordinate.
    fn coords(&self, p: usize, y: &mut [f64]) -> f64 {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.axes[i + 1].value(self.index_on(p, i + 1));
        }
        self.axes[0].value(self.index_on(p, 0))
    }

    /// First derivative along `a` with second-order (central or one-sided)
    /// differences; exact on quadratics.
    #[inline]
    fn d1(&self, w: &[f64], p: usize, a: usize) -> f64 {
        let (n, s, h) = (self.axes[a].n, self.strides[a], self.axes[a].spacing());
        let i = self.index_on(p, a);
        if i == 0 {
            (-3.0 * w[p] + 4.0 * w[p + s] - w[p + 2 * s]) / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * w[p] - 4.0 * w[p - s] + w[p - 2 * s]) / (2.0 * h)
        } else {
            (w[p + s] - w[p - s]) / (2.0 * h)
        }
    }

    /// Second derivative along `a`; exact on quadratics, one-sided four-point
    /// formula at the edges.
    #[inline]
    fn d2(&self, w: &[f64], p: usize, a: usize) -> f64 {
        let (n, s, h) = (self.axes[a].n, self.strides[a], self.axes[a].spacing());
        let i = self.index_on(p, a);
        let h2 = h * h;
        if i == 0 {
            (2.0 * w[p] - 5.0 * w[p + s] + 4.0 * w[p + 2 * s] - w[p + 3 * s]) / h2
        } else if i == n - 1 {
            (2.0 * w[p] - 5.0 * w[p - s] + 4.0 * w[p - 2 * s] - w[p - 3 * s]) / h2
        } else {
            (w[p + s] - 2.0 * w[p] + w[p - s]) / h2
        }
    }

    /// Mixed derivative along `a`, `b`: the `b`-derivative of the
    /// `a`-derivative. In the interior this is the four-point corner stencil.
    #[inline]
    fn d11(&self, w: &[f64], p: usize, a: usize, b: usize) -> f64 {
        let (n, s, h) = (self.axes[b].n, self.strides[b], self.axes[b].spacing());
        let i = self.index_on(p, b);
        if i == 0 {
            (-3.0 * self.d1(w, p, a) + 4.0 * self.d1(w, p + s, a) - self.d1(w, p + 2 * s, a))
                / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * self.d1(w, p, a) - 4.0 * self.d1(w, p - s, a) + self.d1(w, p - 2 * s, a))
                / (2.0 * h)
        } else {
            (self.d1(w, p + s, a) - self.d1(w, p - s, a)) / (2.0 * h)
        }
    }

    /// Forward and backward one-sided differences along `a`. At an edge the
    /// missing side falls back to the inward difference.
    #[inline]
    fn upwind(&self, w: &[f64], p: usize, a: usize, scheme: UpwindScheme) -> (f64, f64) {
        let (n, s, h) = (self.axes[a].n, self.strides[a], self.axes[a].spacing());
        let i = self.index_on(p, a);
        let at = |k: isize| w[(p as isize + k * s as isize) as usize];
        let fwd1 = |_: ()| (at(1) - at(0)) / h;
        let bwd1 = |_: ()| (at(0) - at(-1)) / h;
        if i == 0 {
            let f = fwd1(());
            return (f, f);
        }
        if i == n - 1 {
            let b = bwd1(());
            return (b, b);
        }
        match scheme {
            UpwindScheme::FirstOrder => (fwd1(()), bwd1(())),
            UpwindScheme::Eno2 => {
                let d2c = at(1) - 2.0 * at(0) + at(-1);
                let fwd = if i + 2 < n {
                    let d2p = at(2) - 2.0 * at(1) + at(0);
                    fwd1(()) - smaller(d2c, d2p) / (2.0 * h)
                } else {
                    fwd1(()) - d2c / (2.0 * h)
                };
                let bwd = if i >= 2 {
                    let d2m = at(0) - 2.0 * at(-1) + at(-2);
                    bwd1(()) + smaller(d2c, d2m) / (2.0 * h)
                } else {
                    bwd1(()) + d2c / (2.0 * h)
                };
                (fwd, bwd)
            }
        }
    }
}

#[inline]
fn smaller(a: f64, b: f64) -> f64 {
    if a.abs() <= b.abs() {
        a
    } else {
        b
    }
}

/// Dual value on the HJB grid, one slice per saved level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualGrid {
    pub config: HjbConfig,
    pub times: Vec<f64>,
    /// `slices[k]` holds `W(t_k, .)` in `x`-major order.
    pub slices: Vec<Vec<f64>>,
    pub dt: f64,
}

impl DualGrid {
    fn grid(&self) -> Grid {
        self.config.grid()
    }

    pub fn y_len(&self) -> usize {
        self.config.y_axes.iter().map(|a| a.n).product()
    }

    /// y points and W values of level `k` at x index `ix`.
    pub fn slice(&self, k: usize, ix: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if k > self.config.levels || ix >= self.config.x_axis.n {
            return Err(Error::InvalidArgument(format!("no slice at level {k}, x index {ix}")));
        }
        let grid = self.grid();
        let m = self.y_len();
        let dp = self.config.y_axes.len();
        let mut points = Vec::with_capacity(m);
        let mut y = vec![0.0; dp];
        for p in ix * m..(ix + 1) * m {
            grid.coords(p, &mut y);
            points.push(y.clone());
        }
        Ok((points, self.slices[k][ix * m..(ix + 1) * m].to_vec()))
    }

    /// Whether the y index tuple of flat slice point `q` is trusted.
    pub fn is_trusted(&self, ix: usize, q: usize) -> bool {
        let grid = self.grid();
        let p = ix * self.y_len() + q;
        grid.axes
            .iter()
            .enumerate()
            .all(|(a, axis)| axis.is_trusted(grid.index_on(p, a), self.config.trusted_margin))
    }

    /// Index of the x grid point closest to `x`.
    pub fn nearest_x(&self, x: f64) -> usize {
        let a = self.config.x_axis;
        if !a.is_active() {
            return 0;
        }
        (((x - a.lo) / a.spacing()).round().max(0.0) as usize).min(a.n - 1)
    }

    /// Multilinear interpolation of `W(t_k, x, y)`.
    pub fn value_at(&self, k: usize, x: f64, y: &[f64]) -> f64 {
        let grid = self.grid();
        let coords: Vec<f64> = std::iter::once(x).chain(y.iter().copied()).collect();
        let mut base = 0;
        let mut frac = Vec::with_capacity(coords.len());
        for (a, &c) in coords.iter().enumerate() {
            let axis = grid.axes[a];
            if !axis.is_active() {
                frac.push((0, 0.0));
                continue;
            }
            let t = ((c - axis.lo) / axis.spacing()).clamp(0.0, (axis.n - 1) as f64);
            let i = (t.floor() as usize).min(axis.n - 2);
            base += i * grid.strides[a];
            frac.push((grid.strides[a], t - i as f64));
        }
        let w = &self.slices[k];
        let mut acc = 0.0;
        for corner in 0..(1usize << coords.len()) {
            let mut idx = base;
            let mut weight = 1.0;
            for (a, &(stride, fr)) in frac.iter().enumerate() {
                if (corner >> a) & 1 == 1 {
                    if stride == 0 {
                        weight = 0.0;
                    }
                    idx += stride;
                    weight *= fr;
                } else {
                    weight *= 1.0 - fr;
                }
            }
            if weight != 0.0 {
                acc += weight * w[idx];
            }
        }
        acc
    }

    /// Largest deviation between the corner average and the exact terminal
    /// value at cell midpoints: the terminal-slice interpolation error.
    pub fn terminal_interpolation_error(&self, problem: &MarkovProblem) -> f64 {
        let dp = self.config.y_axes.len();
        let hy: Vec<f64> = self.config.y_axes.iter().map(Axis::spacing).collect();
        let mut g = vec![0.0; dp];
        let mut worst: f64 = 0.0;
        let xa = self.config.x_axis;
        for ix in 0..xa.n {
            let x = xa.value(ix);
            problem.terminal(x, &mut g);
            let cost = |y: &[f64]| y.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let counts: Vec<usize> = self.config.y_axes.iter().map(|a| a.n - 1).collect();
            let cells: usize = counts.iter().product();
            let mut y0 = vec![0.0; dp];
            let mut y = vec![0.0; dp];
            for c in 0..cells {
                let mut rest = c;
                for i in (0..dp).rev() {
                    y0[i] = self.config.y_axes[i].value(rest % counts[i]);
                    rest /= counts[i];
                }
                let mut avg = 0.0;
                for corner in 0..(1usize << dp) {
                    for i in 0..dp {
                        y[i] = y0[i] + hy[i] * ((corner >> i) & 1) as f64;
                    }
                    avg += cost(&y);
                }
                avg /= (1usize << dp) as f64;
                for i in 0..dp {
                    y[i] = y0[i] + 0.5 * hy[i];
                }
                worst = worst.max((avg - cost(&y)).abs());
            }
        }
        worst
    }

    /// Default nodal threshold: ten times the terminal interpolation error.
    pub fn default_eps(&self, problem: &MarkovProblem) -> f64 {
        10.0 * self.terminal_interpolation_error(problem)
    }
}

/// Marches the dual HJB equation backwards from `W(T) = |y - g(x)|^2`.
pub fn solve_dual_hjb(problem: &MarkovProblem, config: &HjbConfig) -> Result<DualGrid> {
    config.validate(problem)?;
    let dt = config.horizon / (config.levels * config.substeps) as f64;
    let max_dt = config.max_stable_dt(problem);
    if dt > max_dt {
        return Err(Error::Cfl { dt, max_dt });
    }
    let grid = config.grid();
    let dp = problem.value_dim;
    let mut w = vec![0.0; grid.len];
    let mut y = vec![0.0; dp];
    let mut g = vec![0.0; dp];
    for (p, wp) in w.iter_mut().enumerate() {
        let x = grid.coords(p, &mut y);
        problem.terminal(x, &mut g);
        *wp = y.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
    }
    let solver = HjbOperator::new(problem, config, &grid);
    let mut slices = vec![Vec::new(); config.levels + 1];
    slices[config.levels] = w.clone();
    let (mut l, mut w1, mut w2) = (vec![0.0; grid.len], vec![0.0; grid.len], vec![0.0; grid.len]);
    let mut step = config.levels * config.substeps;
    for k in (0..config.levels).rev() {
        for _ in 0..config.substeps {
            let t = step as f64 * dt;
            solver.apply(t, &w, &mut l);
            for p in 0..grid.len {
                w1[p] = w[p] + dt * l[p];
            }
            solver.apply(t - dt, &w1, &mut l);
            for p in 0..grid.len {
                w2[p] = 0.75 * w[p] + 0.25 * (w1[p] + dt * l[p]);
            }
            solver.apply(t - 0.5 * dt, &w2, &mut l);
            for p in 0..grid.len {
                w[p] = (w[p] + 2.0 * (w2[p] + dt * l[p])) / 3.0;
                if w[p] < 0.0 {
                    w[p] = 0.0;
                }
            }
            step -= 1;
        }
        slices[k] = w.clone();
    }
    let times = (0..=config.levels)
        .map(|k| config.horizon * k as f64 / config.levels as f64)
        .collect();
    Ok(DualGrid { config: config.clone(), times, slices, dt })
}

struct HjbOperator<'a> {
    problem: &'a MarkovProblem,
    config: &'a HjbConfig,
    grid: &'a Grid,
}

impl<'a> HjbOperator<'a> {
    fn new(problem: &'a MarkovProblem, config: &'a HjbConfig, grid: &'a Grid) -> Self {
        Self { problem, config, grid }
    }

    /// `out = W_xx / 2 + min_{z,u} [ z z^T : W_yy / 2 + z . W_xy - f . W_y ]`.
    fn apply(&self, t: f64, w: &[f64], out: &mut [f64]) {
        let grid = self.grid;
        let dp = self.problem.value_dim;
        let x_active = self.config.x_axis.is_active();
        let nz = self.config.z_grid.len() / dp;
        let diffusive = self.config.z_grid.iter().any(|&v| v != 0.0);
        let mut y = [0.0; 2];
        let mut f = [0.0; 2];
        let mut fwd = [0.0; 2];
        let mut bwd = [0.0; 2];
        let mut wyy = [[0.0; 2]; 2];
        let mut wxy = [0.0; 2];
        for p in 0..grid.len {
            let x = grid.coords(p, &mut y[..dp]);
            let wxx = if x_active { grid.d2(w, p, 0) } else { 0.0 };
            for i in 0..dp {
                let (a, b) = grid.upwind(w, p, i + 1, self.config.scheme);
                fwd[i] = a;
                bwd[i] = b;
                if diffusive {
                    wyy[i][i] = grid.d2(w, p, i + 1);
                    for j in 0..i {
                        let m = grid.d11(w, p, i + 1, j + 1);
                        wyy[i][j] = m;
                        wyy[j][i] = m;
                    }
                    wxy[i] = if x_active { grid.d11(w, p, 0, i + 1) } else { 0.0 };
                }
            }
            let mut best = f64::INFINITY;
            for zi in 0..nz {
                let z = &self.config.z_grid[zi * dp..(zi + 1) * dp];
                let mut diff = 0.0;
                if diffusive {
                    for i in 0..dp {
                        for j in 0..dp {
                            diff += 0.5 * z[i] * z[j] * wyy[i][j];
                        }
                        diff += z[i] * wxy[i];
                    }
                }
                for ui in 0..self.problem.controls.len() {
                    self.problem.generator(t, x, &y[..dp], z, self.problem.controls.point(ui), &mut f[..dp]);
                    let mut adv = 0.0;
                    for i in 0..dp {
                        let a = -f[i];
                        adv += a * if a > 0.0 { fwd[i] } else { bwd[i] };
                    }
                    best = best.min(diff + adv);
                }
            }
            out[p] = 0.5 * wxx + best;
        }
    }
}

/// Sublevel set `{W <= eps}` of a dual slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalSet {
    pub level: usize,
    pub eps: f64,
    /// Grid points in the set, sorted lexicographically.
    pub points: Vec<Vec<f64>>,
    /// Set when some point lies in the untrusted boundary band.
    pub touches_untrusted: bool,
}

impl NodalSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Extracts the nodal set of the HJB slice at level `k`, x index `ix`.
pub fn extract_nodal_set(grid: &DualGrid, k: usize, ix: usize, eps: f64) -> Result<NodalSet> {
    let (points, values) = grid.slice(k, ix)?;
    let mut touches = false;
    let mut out = Vec::new();
    for (q, (p, v)) in points.into_iter().zip(values).enumerate() {
        if v <= eps {
            touches |= !grid.is_trusted(ix, q);
            out.push(p);
        }
    }
    out.sort_by(|a, b| crate::bsde::lex_cmp(a, b));
    if out.is_empty() {
        log::warn!("nodal set at level {k} is empty for eps = {eps:e}; increase eps");
    }
    Ok(NodalSet { level: k, eps, points: out, touches_untrusted: touches })
}

/// Static value recovered from a nodal set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualStaticValue {
    pub value: f64,
    pub argmax: Vec<f64>,
    /// Whether `argmax` lies within `cell` of the supplied reachable set.
    pub near_reachable: Option<bool>,
}

/// `max phi` over the nodal set; ties go to the first point in
/// lexicographic order. Fails on an empty nodal set.
pub fn dual_static_value(
    nodal: &NodalSet,
    utility: &dyn Fn(&[f64]) -> f64,
    reachable: Option<(&[Vec<f64>], f64)>,
) -> Result<DualStaticValue> {
    let mut best: Option<(f64, &Vec<f64>)> = None;
    for p in &nodal.points {
        let v = utility(p);
        if best.map_or(true, |(b, _)| v > b) {
            best = Some((v, p));
        }
    }
    let (value, argmax) = best.ok_or_else(|| {
        Error::Precondition(format!("nodal set for eps = {:e} is empty; increase eps", nodal.eps))
    })?;
    let near_reachable = reachable.map(|(set, cell)| {
        set.iter().any(|r| r.iter().zip(argmax).all(|(a, b)| (a - b).abs() <= cell))
    });
    Ok(DualStaticValue { value, argmax: argmax.clone(), near_reachable })
}

/// Directed Hausdorff distances `(sup_a d(a, B), sup_b d(b, A))`.
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    fn directed(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
    (directed(a, b), directed(b, a))
}

/// Fitted constant `C` in `|W(y1) - W(y2)| <= C (1 + |y1| + |y2|) |y1 - y2|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WRegularity {
    pub fitted_c: f64,
    pub pairs: usize,
}

/// Fits the local Lipschitz constant of a slice over all pairs of at most
/// 2000 evenly subsampled points.
pub fn check_w_regularity(points: &[Vec<f64>], values: &[f64]) -> WRegularity {
    let stride = (points.len() / 2000).max(1);
    let idx: Vec<usize> = (0..points.len()).step_by(stride).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut c: f64 = 0.0;
    let mut pairs = 0;
    for (n, &i) in idx.iter().enumerate() {
        for &j in &idx[n + 1..] {
            let d: Vec<f64> = points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
            let dist = norm(&d);
            if dist == 0.0 {
                continue;
            }
            let ratio = (values[i] - values[j]).abs()
                / ((1.0 + norm(&points[i]) + norm(&points[j])) * dist);
            c = c.max(ratio);
            pairs += 1;
        }
    }
    WRegularity { fitted_c: c, pairs }
}

/// Exact dual value on a tree over a finite `z` grid and the control set.
///
/// Each step inverts the explicit backward scheme: from `X_j` it solves
/// `m = X_j - f(t_j, node, m, Z, u) dt` by fixed-point iteration and moves to
/// `X_{j+1} = m + Z dB`. Controls are chosen per visited node, which on
/// path-mode trees is the same as adapted policies.
pub struct DirectDual<'a> {
    problem: &'a BsdeProblem,
    tree: &'a ScenarioTree,
    z_grid: Vec<f64>,
    increments: Vec<f64>,
    cap: u64,
}

impl<'a> DirectDual<'a> {
    /// `z_grid` holds `d' * d` values per candidate.
    pub fn new(problem: &'a BsdeProblem, tree: &'a ScenarioTree, z_grid: Vec<f64>, cap: u64) -> Result<Self> {
        problem.validate(tree)?;
        let zd = problem.value_dim() * tree.dim();
        if z_grid.is_empty() || z_grid.len() % zd != 0 {
            return Err(Error::InvalidArgument(format!(
                "z grid must hold d' * d = {zd} values per candidate"
            )));
        }
        if problem.lipschitz() * tree.dt() >= 1.0 {
            return Err(Error::Precondition(format!(
                "inverting the backward step needs L dt < 1, got {}",
                problem.lipschitz() * tree.dt()
            )));
        }
        Ok(Self { problem, tree, increments: tree.increments(), z_grid, cap })
    }

    fn candidates(&self) -> usize {
        self.z_grid.len() / (self.problem.value_dim() * self.tree.dim()) * self.problem.controls().len()
    }

    fn check_cost(&self, depth: usize) -> Result<()> {
        let cost = ((self.candidates() * self.tree.branching()) as f64).powi(depth as i32);
        if cost > self.cap as f64 {
            Err(Error::EnumerationCap { count: cost, cap: self.cap })
        } else {
            Ok(())
        }
    }

    /// Children values `X_{k+1}` of `x` at `(k, node)` under `(z, u)`.
    pub fn forward_step(&self, k: usize, node: usize, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        let dp = self.problem.value_dim();
        let d = self.tree.dim();
        let dt = self.tree.dt();
        let mut buf = Vec::new();
        let ctx = self.tree.node_ctx(k, node, &mut buf);
        let mut m = x.to_vec();
        let mut f = vec![0.0; dp];
        for _ in 0..200 {
            self.problem.generator(&ctx, &m, z, u, &mut f);
            let mut change: f64 = 0.0;
            for i in 0..dp {
                let next = x[i] - f[i] * dt;
                change = change.max((next - m[i]).abs());
                m[i] = next;
            }
            if change <= 1e-16 * (1.0 + m.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
                break;
            }
        }
        for c in 0..self.tree.branching() {
            for i in 0..dp {
                let mut v = m[i];
                for l in 0..d {
                    v += z[i * d + l] * self.increments[c * d + l];
                }
                out[c * dp + i] = v;
            }
        }
    }

    /// `W(t_k, node, y)`.
    pub fn value(&self, k: usize, node: usize, y: &[f64]) -> Result<f64> {
        self.tree.check_node(k, node)?;
        if y.len() != self.problem.value_dim() {
            return Err(Error::Dimension("target has the wrong dimension".into()));
        }
        self.check_cost(self.tree.steps() - k)?;
        Ok(self.value_rec(k, node, y))
    }

    fn value_rec(&self, k: usize, node: usize, x: &[f64]) -> f64 {
        let dp = self.problem.value_dim();
        if k == self.tree.steps() {
            let mut buf = Vec::new();
            let ctx = self.tree.node_ctx(k, node, &mut buf);
            let mut xi = vec![0.0; dp];
            self.problem.terminal(&ctx, &mut xi);
            return x.iter().zip(&xi).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        self.minimize(k, node, x, &|c, xc| self.value_rec(k + 1, self.tree.child(k, node, c), xc), false)
    }

    /// `min_{z,u}` of the average (or, with `worst`, the maximum) of
    /// `next(child, X_{k+1})` over the children.
    fn minimize(&self, k: usize, node: usize, x: &[f64], next: &dyn Fn(usize, &[f64]) -> f64, worst: bool) -> f64 {
        let dp = self.problem.value_dim();
        let zd = dp * self.tree.dim();
        let b = self.tree.branching();
        let mut children = vec![0.0; b * dp];
        let mut best = f64::INFINITY;
        for z in self.z_grid.chunks(zd) {
            for ui in 0..self.problem.controls().len() {
                self.forward_step(k, node, x, z, self.problem.controls().point(ui), &mut children);
                let mut acc = 0.0;
                for c in 0..b {
                    let v = next(c, &children[c * dp..(c + 1) * dp]);
                    acc = if worst { f64::max(acc, v) } else { acc + v };
                }
                if !worst {
                    acc /= b as f64;
                }
                best = best.min(acc);
            }
        }
        best
    }

    /// `min` over controls on `[k1, k2)` of `max` over the level-`k2`
    /// successors of `W(t_{k2}, ., X_{k2})`, starting from `X_{k1} = y`.
    pub fn steering_value(&self, k1: usize, node: usize, y: &[f64], k2: usize) -> Result<f64> {
        self.tree.check_node(k1, node)?;
        self.tree.check_level(k2)?;
        if k2 < k1 {
            return Err(Error::InvalidArgument("steering needs k1 <= k2".into()));
        }
        self.check_cost(self.tree.steps() - k1)?;
        Ok(self.steer_rec(k1, node, y, k2))
    }

    fn steer_rec(&self, k: usize, node: usize, x: &[f64], k2: usize) -> f64 {
        if k == k2 {
            return self.value_rec(k, node, x);
        }
        self.minimize(k, node, x, &|c, xc| self.steer_rec(k + 1, self.tree.child(k, node, c), xc, k2), true)
    }
}

/// Dual value on a tree, by direct minimization.
pub fn dual_value_direct(
    problem: &BsdeProblem,
    tree: &ScenarioTree,
    k: usize,
    node: usize,
    y: &[f64],
    z_grid: &[f64],
    cap: u64,
) -> Result<f64> {
    DirectDual::new(problem, tree, z_grid.to_vec(), cap)?.value(k, node, y)
}

/// All grid points of the tensor grid spanned by `axes`, lexicographic.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..a.n).map(move |i| {
                    let mut q = p.clone();
                    q.push(a.value(i));
                    q
                })
            })
            .collect();
    }
    out
}

/// Nodal set of the tree dual value at `(k, node)` over a y grid.
pub fn nodal_set_direct(dual: &DirectDual, k: usize, node: usize, axes: &[Axis], eps: f64) -> Result<NodalSet> {
    let mut points = Vec::new();
    for y in grid_points(axes) {
        if dual.value(k, node, &y)? <= eps {
            points.push(y);
        }
    }
    Ok(NodalSet { level: k, eps, points, touches_untrusted: false })
}

/// Outcome of the two inclusion checks of the geometric dynamic programming
/// principle between levels `k1 < k2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricDppReport {
    pub eps: f64,
    /// Smallest `rho` such that every nodal point at `k1` can be steered into
    /// the `rho` nodal sets of all successors at `k2`.
    pub rho: f64,
    pub nodal_points: usize,
    /// Grid points that can be steered into the `eps` nodal sets at `k2`.
    pub steerable_points: usize,
    /// `max (W(k1, y) - eps)^+` over steerable points.
    pub inclusion_slack: f64,
    pub passed: bool,
}

/// Checks both inclusions of the geometric DPP at `(k1, node)`.
///
/// (a) every `y` in the `eps` nodal set admits controls steering `X_{k2}`
/// into the `rho` nodal set at every successor; `rho` is reported.
/// (b) every grid point steerable into the `eps` nodal sets has
/// `W(k1, y) <= eps`; the excess is reported as `inclusion_slack`.
pub fn check_geometric_dpp(
    dual: &DirectDual,
    k1: usize,
    node: usize,
    k2: usize,
    axes: &[Axis],
    eps: f64,
) -> Result<GeometricDppReport> {
    if k1 >= k2 {
        return Err(Error::InvalidArgument(format!("need k1 < k2, got {k1} and {k2}")));
    }
    let mut rho: f64 = 0.0;
    let mut nodal_points = 0;
    let mut steerable = 0;
    let mut slack: f64 = 0.0;
    for y in grid_points(axes) {
        let w = dual.value(k1, node, &y)?;
        let s = dual.steering_value(k1, node, &y, k2)?;
        if w <= eps {
            nodal_points += 1;
            rho = rho.max(s);
        }
        if s <= eps {
            steerable += 1;
            slack = slack.max(w - eps);
        }
    }
    let passed = nodal_points > 0 && rho.is_finite() && slack <= 1e-12;
    Ok(GeometricDppReport { eps, rho, nodal_points, steerable_points: steerable, inclusion_slack: slack, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::ControlSet;
    use crate::lattice::{TimeGrid, TreeMode};

    fn bias_problem() -> MarkovProblem {
        MarkovProblem::new(
            1,
            ControlSet::scalar(&[0.0]).unwrap(),
            0.0,
            |_, _, _, _, _, out| out[0] = 0.0,
            |x, out| out[0] = x,
            |y| y[0],
        )
    }

    #[test]
    fn hjb_keeps_quadratic_exact() {
        let p = bias_problem();
        let z: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.5).collect();
        let mut cfg = HjbConfig::new(
            0.5,
            2,
            Axis::new(-1.0, 1.0, 21).unwrap(),
            vec![Axis::new(-1.0, 1.0, 21).unwrap()],
            z,
        );
        cfg.substeps = cfg.stable_substeps(&p);
        let g = solve_dual_hjb(&p, &cfg).unwrap();
        let (pts, vals) = g.slice(0, 5).unwrap();
        let x = cfg.x_axis.value(5);
        for (p, v) in pts.iter().zip(vals) {
            assert!((v - (p[0] - x).powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn cfl_violation_names_bound() {
        let p = bias_problem();
        let cfg = HjbConfig::new(
            1.0,
            1,
            Axis::new(-1.0, 1.0, 41).unwrap(),
            vec![Axis::new(-1.0, 1.0, 41).unwrap()],
            vec![0.0, 1.0],
        );
        match solve_dual_hjb(&p, &cfg) {
            Err(Error::Cfl { dt, max_dt }) => assert!(dt > max_dt),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn direct_dual_bias_variance() {
        let tree = ScenarioTree::new(TimeGrid::new(1.0, 3).unwrap(), 1, TreeMode::Path).unwrap();
        let p = bias_problem().to_bsde();
        // W(0, y) = y^2 + min E sum (Z - 1)^2 dt = y^2 when 1 is in the grid.
        let w = dual_value_direct(&p, &tree, 0, 0, &[1.0], &[0.0, 0.5, 1.0], 1_000_000).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        let w = dual_value_direct(&p, &tree, 0, 0, &[1.0], &[0.0, 0.5], 1_000_000).unwrap();
        assert!((w - 1.25).abs() < 1e-12);
    }
}
