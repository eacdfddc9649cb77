//! Finite differences for the terminal-value problem
//! `v_t + mu v_x + sigma^2 v_xx / 2 + F(t, x, v, sigma v_x) = 0`, `v(T, .) = g`.
//!
//! Each backward step solves one tridiagonal system: diffusion and the
//! upwinded drift are implicit, the nonlinearity is either lagged (imex) or
//! resolved by damped Newton.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::control::ControlPolicy;
use crate::problem::{eval_driver, ControlProblemSpec, DriverSpec, ForwardSpec, ProblemError};
use crate::sde::TimeGrid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PdeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("Newton iteration did not converge at time index {step} (t = {t})")]
    Newton { step: usize, t: f64 },
    #[error("non-finite value at time index {step}, node {node} (x = {x})")]
    NonFinite { step: usize, node: usize, x: f64 },
    #[error("at time index {step}: {source}")]
    Problem { step: usize, source: ProblemError },
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 30;
const STIFFNESS_THRESHOLD: f64 = 0.1;
/// Half-width of the default truncation in units of `sigma sqrt(T)`.
pub const DEFAULT_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_points: usize,
}

impl SpaceGrid {
    pub fn new(x_lo: f64, x_hi: f64, n_points: usize) -> Result<Self, PdeError> {
        if n_points < 3 {
            return Err(PdeError::Argument(format!("space grid needs at least 3 points, got {n_points}")));
        }
        if !(x_lo < x_hi) || !x_lo.is_finite() || !x_hi.is_finite() {
            return Err(PdeError::Argument(format!("space interval [{x_lo}, {x_hi}] is empty")));
        }
        Ok(SpaceGrid { x_lo, x_hi, n_points })
    }

    /// `[x0 - 8 s sqrt(T), x0 + 8 s sqrt(T)]` with `s = |sigma(0, x0)|`.
    pub fn default_for(fwd: &ForwardSpec, n_points: usize) -> Result<Self, PdeError> {
        let s = fwd.diffusion(0.0, fwd.x0).map_err(|source| PdeError::Problem { step: 0, source })?.abs();
        let s = if s > 0.0 { s } else { 1.0 };
        let half = DEFAULT_HALF_WIDTH * s * fwd.horizon.sqrt();
        SpaceGrid::new(fwd.x0 - half, fwd.x0 + half, n_points)
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.n_points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.x_hi
        } else {
            self.x_lo + i as f64 * self.dx()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Halves the spacing; node `i` becomes node `2i`.
    pub fn refined(&self) -> SpaceGrid {
        SpaceGrid { n_points: 2 * self.n_points - 1, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeScheme {
    Imex,
    NewtonImplicit,
    /// Imex, switching to Newton on steps where `H dt |v_x| > 0.1`.
    Auto,
}

impl PdeScheme {
    pub fn name(self) -> &'static str {
        match self {
            PdeScheme::Imex => "imex",
            PdeScheme::NewtonImplicit => "newton_implicit",
            PdeScheme::Auto => "auto",
        }
    }
}

pub type Profile = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum BoundaryPolicy {
    /// `v_xx = 0` at both edges.
    LinearExtrapolation,
    /// Edge values pinned to `profile(t, x)`.
    DirichletFromProfile(Profile),
}

impl BoundaryPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryPolicy::LinearExtrapolation => "linear_extrapolation",
            BoundaryPolicy::DirichletFromProfile(_) => "dirichlet_from_profile",
        }
    }
}

impl fmt::Debug for BoundaryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct GridSolution {
    pub tgrid: TimeGrid,
    pub sgrid: SpaceGrid,
    /// `(n_steps + 1) x n_points`, row `k` at time `t_k`.
    pub v: Array2<f64>,
    pub v_x: Array2<f64>,
    pub scheme: PdeScheme,
    pub boundary: &'static str,
    /// Number of time steps resolved by Newton.
    pub newton_steps: usize,
}

impl GridSolution {
    /// Linear interpolation of `v(t_k, .)` in `x`, constant beyond the grid.
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        interp_row(&self.sgrid, self.v.row(k).as_slice().expect("contiguous"), x)
    }

    pub fn initial_value(&self, x: f64) -> f64 {
        self.value_at(0, x)
    }

    /// Bilinear interpolation of `v_x`.
    pub fn gradient(&self, t: f64, x: f64) -> f64 {
        let g = &self.tgrid;
        let s = ((t - g.t_start) / g.dt()).clamp(0.0, g.n_steps as f64);
        let k = (s.floor() as usize).min(g.n_steps.saturating_sub(1));
        let w = s - k as f64;
        let lo = interp_row(&self.sgrid, self.v_x.row(k).as_slice().expect("contiguous"), x);
        if w == 0.0 {
            return lo;
        }
        let hi = interp_row(&self.sgrid, self.v_x.row(k + 1).as_slice().expect("contiguous"), x);
        (1.0 - w) * lo + w * hi
    }

    /// Rows `t,x,v,v_x`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,v,v_x")?;
        for k in 0..=self.tgrid.n_steps {
            let t = self.tgrid.time(k);
            for i in 0..self.sgrid.n_points {
                writeln!(w, "{t},{},{},{}", self.sgrid.x(i), self.v[[k, i]], self.v_x[[k, i]])?;
            }
        }
        Ok(())
    }

    /// Little-endian layout:
    ///
    /// | bytes | content |
    /// |-------|---------|
    /// | 4 | magic `GSOL` |
    /// | 4 | format version (u32, currently 1) |
    /// | 8 | number of time levels `n_steps + 1` (u64) |
    /// | 8 | number of space points (u64) |
    /// | 32 | `t_start, t_end, x_lo, x_hi` (f64) |
    /// | 8 n | `v`, row-major by time level |
    /// | 8 n | `v_x`, same order |
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(b"GSOL")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&((self.tgrid.n_steps + 1) as u64).to_le_bytes())?;
        w.write_all(&(self.sgrid.n_points as u64).to_le_bytes())?;
        for b in [self.tgrid.t_start, self.tgrid.t_end, self.sgrid.x_lo, self.sgrid.x_hi] {
            w.write_all(&b.to_le_bytes())?;
        }
        for v in self.v.iter().chain(self.v_x.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

fn interp_row(sgrid: &SpaceGrid, row: &[f64], x: f64) -> f64 {
    let s = ((x - sgrid.x_lo) / sgrid.dx()).clamp(0.0, (sgrid.n_points - 1) as f64);
    let i = (s.floor() as usize).min(sgrid.n_points - 2);
    let w = s - i as f64;
    (1.0 - w) * row[i] + w * row[i + 1]
}

/// Central differences inside, second-order one-sided at the edges.
fn gradient_row(v: &[f64], dx: f64) -> Vec<f64> {
    let n = v.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (v[i + 1] - v[i - 1]) / (2.0 * dx);
    }
    if n >= 3 {
        d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx);
        d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx);
    }
    d
}

/// Solves `lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1] = rhs[i]`.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Edge value as `alpha + beta v_near + gamma v_next` in the adjacent
/// interior unknowns.
#[derive(Debug, Clone, Copy)]
struct Closure {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

/// The tridiagonal operator on interior nodes `1..n-1` with edges eliminated.
struct Tridiag {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    /// Constant part contributed by the edges.
    shift: Vec<f64>,
}

impl Tridiag {
    /// `rows[j] = (l, d, u)` acting on `v_{i-1}, v_i, v_{i+1}` for node `i = j + 1`.
    fn close(rows: &[(f64, f64, f64)], left: Closure, right: Closure) -> Tridiag {
        let m = rows.len();
        let mut lower: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut diag: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mut upper: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let mut shift = vec![0.0; m];
        let l0 = lower[0];
        lower[0] = 0.0;
        shift[0] += l0 * left.alpha;
        diag[0] += l0 * left.beta;
        if m > 1 {
            upper[0] += l0 * left.gamma;
        }
        let un = upper[m - 1];
        upper[m - 1] = 0.0;
        shift[m - 1] += un * right.alpha;
        diag[m - 1] += un * right.beta;
        if m > 1 {
            lower[m - 1] += un * right.gamma;
        }
        Tridiag { lower, diag, upper, shift }
    }
}

struct StepContext<'a> {
    fwd: &'a ForwardSpec,
    spec: &'a DriverSpec,
    xs: &'a [f64],
    dx: f64,
    dt: f64,
}

impl StepContext<'_> {
    /// Rows of `L_h = mu D_upwind + sigma^2/2 D_2` at time `t`, plus sigma per node.
    fn operator_rows(&self, t: f64, step: usize) -> Result<(Vec<(f64, f64, f64)>, Vec<f64>), PdeError> {
        let n = self.xs.len();
        let mut rows = Vec::with_capacity(n - 2);
        let mut sig = vec![0.0; n];
        let p = |source| PdeError::Problem { step, source };
        for (i, s) in sig.iter_mut().enumerate() {
            *s = self.fwd.diffusion(t, self.xs[i]).map_err(p)?;
        }
        for i in 1..n - 1 {
            let mu = self.fwd.drift(t, self.xs[i]).map_err(p)?;
            let d = 0.5 * sig[i] * sig[i] / (self.dx * self.dx);
            let (mut a, mut b, mut c) = (d, -2.0 * d, d);
            if mu > 0.0 {
                b -= mu / self.dx;
                c += mu / self.dx;
            } else {
                a -= mu / self.dx;
                b += mu / self.dx;
            }
            rows.push((a, b, c));
        }
        Ok((rows, sig))
    }

    fn driver_vector(&self, t: f64, v: &[f64], sig: &[f64], step: usize) -> Result<Vec<f64>, PdeError> {
        (1..v.len() - 1)
            .map(|i| {
                let z = sig[i] * (v[i + 1] - v[i - 1]) / (2.0 * self.dx);
                eval_driver(self.spec, t, self.xs[i], v[i], z).map_err(|source| PdeError::Problem { step, source })
            })
            .collect()
    }
}

fn closures(boundary: &BoundaryPolicy, t: f64, xs: &[f64]) -> (Closure, Closure) {
    match boundary {
        BoundaryPolicy::LinearExtrapolation => {
            let c = Closure { alpha: 0.0, beta: 2.0, gamma: -1.0 };
            (c, c)
        }
        BoundaryPolicy::DirichletFromProfile(p) => (
            Closure { alpha: p(t, xs[0]), beta: 0.0, gamma: 0.0 },
            Closure { alpha: p(t, xs[xs.len() - 1]), beta: 0.0, gamma: 0.0 },
        ),
    }
}

fn fill_edges(v: &mut [f64], left: Closure, right: Closure) {
    let n = v.len();
    v[0] = left.alpha + left.beta * v[1] + left.gamma * v[2];
    v[n - 1] = right.alpha + right.beta * v[n - 2] + right.gamma * v[n - 3];
}

fn check_finite(v: &[f64], xs: &[f64], step: usize) -> Result<(), PdeError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(node) => Err(PdeError::NonFinite { step, node, x: xs[node] }),
        None => Ok(()),
    }
}

pub fn solve_pde(
    fwd: &ForwardSpec,
    spec: &DriverSpec,
    sgrid: &SpaceGrid,
    tgrid: &TimeGrid,
    scheme: PdeScheme,
    boundary: &BoundaryPolicy,
) -> Result<GridSolution, PdeError> {
    if !(sgrid.x_lo < fwd.x0 && fwd.x0 < sgrid.x_hi) {
        return Err(PdeError::Argument(format!(
            "x0 = {} must lie strictly inside [{}, {}]",
            fwd.x0, sgrid.x_lo, sgrid.x_hi
        )));
    }
    if matches!(boundary, BoundaryPolicy::LinearExtrapolation) && sgrid.n_points < 4 {
        return Err(PdeError::Argument("linear extrapolation needs at least 4 space points".into()));
    }
    if (tgrid.t_end - fwd.horizon).abs() > 1e-12 * fwd.horizon.max(1.0) {
        return Err(PdeError::Argument(format!(
            "time grid ends at {} but the horizon is {}",
            tgrid.t_end, fwd.horizon
        )));
    }
    let xs = sgrid.points();
    let n = xs.len();
    let dt = tgrid.dt();
    let ctx = StepContext { fwd, spec, xs: &xs, dx: sgrid.dx(), dt };
    let mut v = Array2::zeros((tgrid.n_steps + 1, n));
    let terminal: Vec<f64> = xs
        .iter()
        .map(|&x| spec.terminal(x).map_err(|source| PdeError::Problem { step: tgrid.n_steps, source }))
        .collect::<Result<_, _>>()?;
    check_finite(&terminal, &xs, tgrid.n_steps)?;
    v.row_mut(tgrid.n_steps).assign(&ndarray::Array1::from(terminal.clone()));
    let mut next = terminal;
    let mut newton_steps = 0;

    for k in (0..tgrid.n_steps).rev() {
        let t = tgrid.time(k);
        let (rows, sig) = ctx.operator_rows(t, k)?;
        let (left, right) = closures(boundary, t, &xs);
        let use_newton = match scheme {
            PdeScheme::Imex => false,
            PdeScheme::NewtonImplicit => true,
            PdeScheme::Auto => {
                let big_h = spec.h_of_t(t).map_err(|source| PdeError::Problem { step: k, source })?.abs();
                let grad = gradient_row(&next, ctx.dx);
                grad.iter().zip(&sig).any(|(g, s)| big_h * dt * (g * s).abs() > STIFFNESS_THRESHOLD)
            }
        };
        // Backward Euler: (I - dt L_h) v^k = v^{k+1} + dt F.
        let sys_rows: Vec<(f64, f64, f64)> = rows.iter().map(|&(a, b, c)| (-dt * a, 1.0 - dt * b, -dt * c)).collect();
        let sys = Tridiag::close(&sys_rows, left, right);
        let f_lag = ctx.driver_vector(t, &next, &sig, k)?;
        let rhs: Vec<f64> = (0..n - 2).map(|j| next[j + 1] + dt * f_lag[j] - sys.shift[j]).collect();
        let interior = thomas(&sys.lower, &sys.diag, &sys.upper, &rhs);
        let mut current = vec![0.0; n];
        current[1..n - 1].copy_from_slice(&interior);
        fill_edges(&mut current, left, right);
        if use_newton {
            newton_steps += 1;
            current = newton_step(&ctx, t, k, &rows, &sig, &next, current, left, right)?;
        }
        check_finite(&current, &xs, k)?;
        v.row_mut(k).assign(&ndarray::Array1::from(current.clone()));
        next = current;
    }

    let mut v_x = Array2::zeros(v.raw_dim());
    for k in 0..=tgrid.n_steps {
        let g = gradient_row(v.row(k).as_slice().expect("contiguous"), ctx.dx);
        v_x.row_mut(k).assign(&ndarray::Array1::from(g));
    }
    Ok(GridSolution {
        tgrid: *tgrid,
        sgrid: *sgrid,
        v,
        v_x,
        scheme,
        boundary: boundary.name(),
        newton_steps,
    })
}

/// Damped Newton on `R(v) = v - dt L_h v - dt F(v, sigma D_c v) - v^{k+1}`.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    ctx: &StepContext<'_>,
    t: f64,
    k: usize,
    rows: &[(f64, f64, f64)],
    sig: &[f64],
    next: &[f64],
    mut v: Vec<f64>,
    left: Closure,
    right: Closure,
) -> Result<Vec<f64>, PdeError> {
    let n = v.len();
    let dt = ctx.dt;
    let p = |source| PdeError::Problem { step: k, source };
    let residual = |v: &[f64]| -> Result<Vec<f64>, PdeError> {
        let f = ctx.driver_vector(t, v, sig, k)?;
        Ok((1..n - 1)
            .map(|i| {
                let (a, b, c) = rows[i - 1];
                v[i] - dt * (a * v[i - 1] + b * v[i] + c * v[i + 1]) - dt * f[i - 1] - next[i]
            })
            .collect())
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut r = residual(&v)?;
    for _ in 0..NEWTON_MAX_ITER {
        let mut jac = Vec::with_capacity(n - 2);
        for i in 1..n - 1 {
            let x = ctx.xs[i];
            let z = sig[i] * (v[i + 1] - v[i - 1]) / (2.0 * ctx.dx);
            let fz = ctx.spec.driver_dz(t, x, z).map_err(p)?;
            let fy = -ctx.spec.lambda_dy(t, v[i]).map_err(p)?;
            let gz = fz * sig[i] / (2.0 * ctx.dx);
            let (a, b, c) = rows[i - 1];
            jac.push((-dt * (a - gz), 1.0 - dt * (b + fy), -dt * (c + gz)));
        }
        let sys = Tridiag::close(&jac, Closure { alpha: 0.0, ..left }, Closure { alpha: 0.0, ..right });
        let delta = thomas(&sys.lower, &sys.diag, &sys.upper, &r);
        let r0 = norm(&r);
        let mut damping = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let mut trial = v.clone();
            for i in 1..n - 1 {
                trial[i] -= damping * delta[i - 1];
            }
            fill_edges(&mut trial, left, right);
            if let Ok(rt) = residual(&trial) {
                if rt.iter().all(|x| x.is_finite()) && (norm(&rt) < r0 || r0 == 0.0) {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            damping *= 0.5;
        }
        let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let step_size = damping * norm(&delta);
        match accepted {
            Some((trial, rt)) => {
                v = trial;
                r = rt;
            }
            None => {
                // no descent possible: converged to rounding level or stuck
                return if r0 <= NEWTON_TOL * scale { Ok(v) } else { Err(PdeError::Newton { step: k, t }) };
            }
        }
        if step_size <= NEWTON_TOL * scale || norm(&r) <= NEWTON_TOL * scale * 1e-2 {
            return Ok(v);
        }
    }
    Err(PdeError::Newton { step: k, t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    /// `(n_steps - 1) x (n_points - 2)`: interior times and nodes.
    pub values: Array2<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `(time index, node index)` of the largest residual.
    pub argmax: (usize, usize),
}

impl ResidualField {
    pub fn flagged(&self, tolerance: f64) -> bool {
        !(self.max_abs <= tolerance)
    }
}

/// `v_t + mu v_x + sigma^2 v_xx / 2 + F(t, x, v, sigma v_x)` by centred
/// differences in time and space on interior nodes.
pub fn evolution_operator_residual(sol: &GridSolution, fwd: &ForwardSpec, spec: &DriverSpec) -> Result<ResidualField, PdeError> {
    let nt = sol.tgrid.n_steps;
    let nx = sol.sgrid.n_points;
    if nt < 2 {
        return Err(PdeError::Argument("residual needs at least 2 time steps".into()));
    }
    let dt = sol.tgrid.dt();
    let dx = sol.sgrid.dx();
    let mut values = Array2::zeros((nt - 1, nx - 2));
    let (mut max_abs, mut sum, mut argmax) = (0.0f64, 0.0, (1, 1));
    for k in 1..nt {
        let t = sol.tgrid.time(k);
        for i in 1..nx - 1 {
            let x = sol.sgrid.x(i);
            let p = |source| PdeError::Problem { step: k, source };
            let v = &sol.v;
            let vt = (v[[k + 1, i]] - v[[k - 1, i]]) / (2.0 * dt);
            let vx = (v[[k, i + 1]] - v[[k, i - 1]]) / (2.0 * dx);
            let vxx = (v[[k, i + 1]] - 2.0 * v[[k, i]] + v[[k, i - 1]]) / (dx * dx);
            let mu = fwd.drift(t, x).map_err(p)?;
            let s = fwd.diffusion(t, x).map_err(p)?;
            let f = eval_driver(spec, t, x, v[[k, i]], s * vx).map_err(p)?;
            let r = vt + mu * vx + 0.5 * s * s * vxx + f;
            values[[k - 1, i - 1]] = r;
            sum += r.abs();
            if r.abs() > max_abs || !r.is_finite() {
                max_abs = r.abs();
                argmax = (k, i);
            }
        }
    }
    let mean_abs = sum / values.len() as f64;
    Ok(ResidualField { values, max_abs, mean_abs, argmax })
}

/// The optimal feedback `u*(t, x) = -B(t) v_x(t, x) / (2 k1(t))`.
pub fn extract_feedback(sol: &GridSolution, cps: &ControlProblemSpec) -> ControlPolicy {
    ControlPolicy::FeedbackGrid(Arc::new(FeedbackGrid { sol: sol.clone(), b: cps.b.clone(), k1: cps.k1.clone() }))
}

#[derive(Debug, Clone)]
pub struct FeedbackGrid {
    pub sol: GridSolution,
    pub b: crate::expr::Expr,
    pub k1: crate::expr::Expr,
}

impl FeedbackGrid {
    pub fn control(&self, t: f64, x: f64) -> f64 {
        -self.b.at_t(t) * self.sol.gradient(t, x) / (2.0 * self.k1.at_t(t))
    }
}

/// Sup-norm differences of `v(0, .)` across three nested resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy {
    /// `v(0, x0)` at each level, coarse to fine.
    pub values: [f64; 3],
    /// `sup |v_h - v_{h/2}|` and `sup |v_{h/2} - v_{h/4}|` on the coarse nodes in the window.
    pub differences: [f64; 2],
    /// `differences[0] / differences[1]`.
    pub ratio: f64,
    /// Error estimate for the finest value at `x0`, assuming the observed ratio.
    pub error_estimate: f64,
}

/// Solves on `(dx, dt)`, `(dx/2, dt/2)` and `(dx/4, dt/4)`. The sup norm is
/// taken over coarse nodes inside `window` (all nodes when `None`).
pub fn refinement_study(
    fwd: &ForwardSpec,
    spec: &DriverSpec,
    sgrid: &SpaceGrid,
    tgrid: &TimeGrid,
    scheme: PdeScheme,
    boundary: &BoundaryPolicy,
    window: Option<(f64, f64)>,
) -> Result<RefinementStudy, PdeError> {
    let grids = [(*sgrid, *tgrid), (sgrid.refined(), tgrid.refined()), (sgrid.refined().refined(), tgrid.refined().refined())];
    let sols = grids
        .iter()
        .map(|(s, t)| solve_pde(fwd, spec, s, t, scheme, boundary))
        .collect::<Result<Vec<_>, _>>()?;
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let diff = |a: &GridSolution, b: &GridSolution, stride: usize| {
        (0..sgrid.n_points)
            .filter(|&i| (lo..=hi).contains(&sgrid.x(i)))
            .map(|i| {
                let ia = i * (a.sgrid.n_points - 1) / (sgrid.n_points - 1);
                (a.v[[0, ia]] - b.v[[0, i * stride]]).abs()
            })
            .fold(0.0f64, f64::max)
    };
    let d0 = diff(&sols[0], &sols[1], 2);
    let d1 = diff(&sols[1], &sols[2], 4);
    let values = [sols[0].initial_value(fwd.x0), sols[1].initial_value(fwd.x0), sols[2].initial_value(fwd.x0)];
    let ratio = d0 / d1;
    let fine_gap = (values[2] - values[1]).abs();
    // geometric tail of the remaining corrections; falls back to the gap itself
    let error_estimate = if ratio > 1.0 && ratio.is_finite() { fine_gap / (ratio - 1.0) } else { fine_gap };
    Ok(RefinementStudy { values, differences: [d0, d1], ratio, error_estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    fn heat() -> (ForwardSpec, DriverSpec) {
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let spec = DriverSpec::new(p("0"), p("0"), p("0"), p("0"), p("x^2"));
        (fwd, spec)
    }

    #[test]
    fn thomas_solves_small_system() {
        let x = thomas(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]);
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn heat_equation_with_exact_profile() {
        let (fwd, spec) = heat();
        let s = SpaceGrid::new(-6.0, 6.0, 401).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let profile: Profile = Arc::new(|t, x| x * x + 1.0 - t);
        let sol = solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::DirichletFromProfile(profile)).unwrap();
        let mut err = 0.0f64;
        for k in 0..=200 {
            for i in 0..401 {
                let x = s.x(i);
                err = err.max((sol.v[[k, i]] - (x * x + 1.0 - t.time(k))).abs());
            }
        }
        assert!(err <= 1e-3, "max error {err}");
        let res = evolution_operator_residual(&sol, &fwd, &spec).unwrap();
        assert!(res.max_abs <= 1e-6, "residual {}", res.max_abs);
    }

    #[test]
    fn terminal_row_is_exact() {
        let (fwd, spec) = heat();
        let s = SpaceGrid::new(-4.0, 4.0, 41).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let sol = solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::LinearExtrapolation).unwrap();
        for i in 0..41 {
            assert_eq!(sol.v[[10, i]], s.x(i).powi(2));
        }
    }

    #[test]
    fn newton_and_imex_agree_on_quadratic_driver() {
        let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
        let (fwd, spec) = (cps.forward(), cps.driver());
        let s = SpaceGrid::default_for(&fwd, 321).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 400).unwrap();
        let a = solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::LinearExtrapolation).unwrap();
        let b = solve_pde(&fwd, &spec, &s, &t, PdeScheme::NewtonImplicit, &BoundaryPolicy::LinearExtrapolation).unwrap();
        let exact = 1f64.tanh() + 1f64.cosh().ln();
        assert!((a.initial_value(1.0) - exact).abs() < 5e-3);
        assert!((b.initial_value(1.0) - exact).abs() < 5e-3);
        assert_eq!(b.newton_steps, 400);
    }

    #[test]
    fn feedback_extrapolates_constantly() {
        let cps = ControlProblemSpec::benchmark(0.0, 0.0, 1.0);
        let (fwd, spec) = (cps.forward(), cps.driver());
        let s = SpaceGrid::new(-4.0, 4.0, 81).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sol = solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::LinearExtrapolation).unwrap();
        let fb = extract_feedback(&sol, &cps);
        assert!(fb.control(0.3, 0.0).abs() < 1e-10);
        assert_eq!(fb.control(0.2, 10.0), fb.control(0.2, 4.0));
    }

    #[test]
    fn binary_dump_layout() {
        let (fwd, spec) = heat();
        let s = SpaceGrid::new(-2.0, 2.0, 5).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let sol = solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::LinearExtrapolation).unwrap();
        let mut buf = Vec::new();
        sol.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GSOL");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 32 + 2 * 8 * 15);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        let first = f64::from_le_bytes(buf[56..64].try_into().unwrap());
        assert_eq!(first, sol.v[[0, 0]]);
    }

    #[test]
    fn rejects_x0_outside_grid() {
        let (fwd, spec) = heat();
        let s = SpaceGrid::new(1.0, 2.0, 5).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 2).unwrap();
        assert!(matches!(
            solve_pde(&fwd, &spec, &s, &t, PdeScheme::Imex, &BoundaryPolicy::LinearExtrapolation),
            Err(PdeError::Argument(_))
        ));
    }
}
