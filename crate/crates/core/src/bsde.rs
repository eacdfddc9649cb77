//! Least-squares Monte Carlo for the backward equation.
//!
//! Three routes estimate the same `(Y, Z)`:
//!
//! * direct: the driver `F` on the drifted ensemble;
//! * transformed: `U = exp(-H (Y - M))`, whose driver has at most linear
//!   growth in the martingale integrand, then `Y = M - ln U / H`;
//! * girsanov: the shifted driver `F + (mu / sigma) z` on the driftless
//!   ensemble.
//!
//! All routes share the recursion
//! `Z_k = E_k[Y_{k+1} dW_k] / dt`, `Y_k = E_k[Y_{k+1}] + F(t_k, X_k, y, Z_k) dt`
//! with conditional expectations regressed on a per-step basis.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{eval_driver, eval_girsanov_driver, DriverSpec, ForwardSpec, ProblemError};
use crate::sde::{PathEnsemble, TimeGrid};
use crate::stats::mean_and_stderr;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BsdeError {
    #[error("regression at step {step} is rank deficient (condition number {condition:e}); use fewer basis functions or more paths")]
    RankDeficient { step: usize, condition: f64 },
    #[error("implicit step {step} did not converge on path {path}")]
    Newton { step: usize, path: usize },
    #[error("transform unreliable at step {step}: {count} of {n_paths} regressed values of U are not positive")]
    TransformBreakdown { step: usize, count: usize, n_paths: usize },
    #[error("backward values at step {step} are not finite; reduce the time step or the quadratic coefficient")]
    Diverged { step: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("at step {step}: {source}")]
    Problem { step: usize, source: ProblemError },
}

const RIDGE: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 20;
pub const U_FLOOR: f64 = 1e-12;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFamily {
    Polynomial { degree: usize },
    PiecewiseLinear { n_knots: usize },
}

impl std::fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisFamily::Polynomial { degree } => write!(f, "polynomial:{degree}"),
            BasisFamily::PiecewiseLinear { n_knots } => write!(f, "piecewise_linear:{n_knots}"),
        }
    }
}

/// Regression basis. States are clipped into `domain` before evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub domain: (f64, f64),
}

impl BasisSpec {
    pub fn new(family: BasisFamily, domain: (f64, f64)) -> Result<Self, BsdeError> {
        match family {
            BasisFamily::Polynomial { degree } if degree < 1 => {
                return Err(BsdeError::Argument("polynomial degree must be at least 1".into()))
            }
            BasisFamily::PiecewiseLinear { n_knots } if n_knots < 2 => {
                return Err(BsdeError::Argument("piecewise-linear basis needs at least 2 knots".into()))
            }
            _ => {}
        }
        if !(domain.0 < domain.1) {
            return Err(BsdeError::Argument(format!("basis domain [{}, {}] is empty", domain.0, domain.1)));
        }
        Ok(BasisSpec { family, domain })
    }

    /// A basis whose domain is the sampled state range of the ensemble.
    pub fn covering(family: BasisFamily, ens: &PathEnsemble) -> Result<Self, BsdeError> {
        let (lo, hi) = ens.states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let pad = 1e-9 * (hi - lo).abs().max(1.0);
        BasisSpec::new(family, (lo - pad, hi + pad))
    }

    /// Builds the basis for one cross-section of states.
    pub fn fit_to(&self, xs: &[f64]) -> StepBasis {
        let n = xs.len() as f64;
        let clip = |x: f64| x.clamp(self.domain.0, self.domain.1);
        let mean = xs.iter().map(|&x| clip(x)).sum::<f64>() / n;
        let var = xs.iter().map(|&x| (clip(x) - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return StepBasis::Constant;
        }
        match self.family {
            BasisFamily::Polynomial { degree } => {
                StepBasis::Polynomial { degree, center: mean, scale: sd, domain: self.domain }
            }
            BasisFamily::PiecewiseLinear { n_knots } => {
                let lo = (mean - 3.5 * sd).max(self.domain.0);
                let hi = (mean + 3.5 * sd).min(self.domain.1);
                StepBasis::Hats { lo, width: (hi - lo) / (n_knots - 1) as f64, n_knots }
            }
        }
    }
}

/// A basis adapted to one time step's cross-section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepBasis {
    /// All states coincide (e.g. the initial step): regress on the constant.
    Constant,
    /// Monomials in `(x - center) / scale`.
    Polynomial { degree: usize, center: f64, scale: f64, domain: (f64, f64) },
    /// Hat functions on uniform knots; constant beyond the outer knots.
    Hats { lo: f64, width: f64, n_knots: usize },
}

impl StepBasis {
    pub fn len(&self) -> usize {
        match self {
            StepBasis::Constant => 1,
            StepBasis::Polynomial { degree, .. } => degree + 1,
            StepBasis::Hats { n_knots, .. } => *n_knots,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        match *self {
            StepBasis::Constant => out[0] = 1.0,
            StepBasis::Polynomial { center, scale, domain, .. } => {
                let s = (x.clamp(domain.0, domain.1) - center) / scale;
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= s;
                }
            }
            StepBasis::Hats { .. } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let (j, w) = self.hat_cell(x);
                out[j] = 1.0 - w;
                out[j + 1] = w;
            }
        }
    }

    /// `d/dx` of each basis function.
    pub fn deriv_into(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match *self {
            StepBasis::Constant => {}
            StepBasis::Polynomial { center, scale, domain, .. } => {
                if x < domain.0 || x > domain.1 {
                    return;
                }
                let s = (x - center) / scale;
                let mut p = 1.0;
                for (j, o) in out.iter_mut().enumerate().skip(1) {
                    *o = j as f64 * p / scale;
                    p *= s;
                }
            }
            StepBasis::Hats { lo, width, n_knots } => {
                let pos = (x - lo) / width;
                if pos < 0.0 || pos > (n_knots - 1) as f64 {
                    return;
                }
                let j = (pos.floor() as usize).min(n_knots - 2);
                out[j] = -1.0 / width;
                out[j + 1] = 1.0 / width;
            }
        }
    }

    pub fn predict(&self, coef: &[f64], x: f64) -> f64 {
        match *self {
            StepBasis::Constant => coef[0],
            StepBasis::Polynomial { center, scale, domain, .. } => {
                let s = (x.clamp(domain.0, domain.1) - center) / scale;
                coef.iter().rev().fold(0.0, |acc, c| acc * s + c)
            }
            StepBasis::Hats { .. } => {
                let (j, w) = self.hat_cell(x);
                (1.0 - w) * coef[j] + w * coef[j + 1]
            }
        }
    }

    pub fn predict_deriv(&self, coef: &[f64], x: f64) -> f64 {
        let mut phi = vec![0.0; self.len()];
        self.deriv_into(x, &mut phi);
        phi.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    /// Left knot index and weight of the right knot.
    fn hat_cell(&self, x: f64) -> (usize, f64) {
        match *self {
            StepBasis::Hats { lo, width, n_knots } => {
                let pos = ((x - lo) / width).clamp(0.0, (n_knots - 1) as f64);
                let j = (pos.floor() as usize).min(n_knots - 2);
                (j, pos - j as f64)
            }
            _ => unreachable!("hat_cell on a non-hat basis"),
        }
    }
}

/// Coefficients of the two regressions performed at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRegression {
    pub basis: StepBasis,
    /// `E_k[Y_{k+1}]` (or `E_k[U_{k+1}]` on the transformed route).
    pub continuation: Vec<f64>,
    /// `E_k[Y_{k+1} dW_k] / dt`.
    pub martingale: Vec<f64>,
    pub condition: f64,
}

/// Fits `E[r_j | x]` for several responses with one normal-equation solve.
/// Accumulation runs over fixed chunks summed in order, so the result does
/// not depend on the thread count.
fn regress(basis: &StepBasis, xs: &[f64], responses: &[&[f64]], step: usize) -> Result<(Vec<Vec<f64>>, f64), BsdeError> {
    let p = basis.len();
    let m = responses.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = xs
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            if let StepBasis::Hats { .. } = basis {
                let mut gram = vec![0.0; p * p];
                let mut rhs = vec![0.0; p * m];
                for (off, &x) in chunk.iter().enumerate() {
                    let i = c * CHUNK + off;
                    let (j0, w) = basis.hat_cell(x);
                    let (w0, w1) = (1.0 - w, w);
                    gram[j0 * p + j0] += w0 * w0;
                    gram[j0 * p + j0 + 1] += w0 * w1;
                    gram[(j0 + 1) * p + j0 + 1] += w1 * w1;
                    for (j, r) in responses.iter().enumerate() {
                        rhs[j * p + j0] += w0 * r[i];
                        rhs[j * p + j0 + 1] += w1 * r[i];
                    }
                }
                return (gram, rhs);
            }
            let len = chunk.len();
            let mut phi = DMatrix::zeros(len, p);
            let mut row = vec![0.0; p];
            for (off, &x) in chunk.iter().enumerate() {
                basis.eval_into(x, &mut row);
                for (a, v) in row.iter().enumerate() {
                    phi[(off, a)] = *v;
                }
            }
            let resp = DMatrix::from_fn(len, m, |off, j| responses[j][c * CHUNK + off]);
            let g = phi.tr_mul(&phi);
            let b = phi.tr_mul(&resp);
            let gram = (0..p * p).map(|ab| g[(ab / p, ab % p)]).collect();
            let rhs = (0..p * m).map(|ja| b[(ja % p, ja / p)]).collect();
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * m];
    for (g, r) in &partials {
        gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = xs.len() as f64;
    let mut g = DMatrix::from_fn(p, p, |a, b| gram[a.min(b) * p + a.max(b)] / n);
    for a in 0..p {
        g[(a, a)] += RIDGE;
    }
    let eig = g.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(BsdeError::RankDeficient { step, condition });
    }
    let chol = g.clone().cholesky().ok_or(BsdeError::RankDeficient { step, condition })?;
    let mut exact = g;
    for a in 0..p {
        exact[(a, a)] -= RIDGE;
    }
    let coefs = (0..m)
        .map(|j| {
            let b = DVector::from_fn(p, |a, _| rhs[j * p + a] / n);
            let mut c = chol.solve(&b);
            // one refinement sweep against the unregularised system removes the ridge bias
            c += chol.solve(&(&b - &exact * &c));
            c.iter().copied().collect()
        })
        .collect();
    Ok((coefs, condition))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsdeScheme {
    /// Driver evaluated at the continuation value.
    Explicit,
    /// Scalar Newton on `y = E_k[Y_{k+1}] + F(t_k, X_k, y, Z_k) dt`.
    OneStepImplicit,
}

impl BsdeScheme {
    /// Implicit when the driver depends on `y`.
    pub fn default_for(spec: &DriverSpec) -> Self {
        if spec.depends_on_y() {
            BsdeScheme::OneStepImplicit
        } else {
            BsdeScheme::Explicit
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Transformed,
    Girsanov,
}

impl Route {
    pub fn name(self) -> &'static str {
        match self {
            Route::Direct => "lsmc_direct",
            Route::Transformed => "lsmc_transformed",
            Route::Girsanov => "lsmc_girsanov",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub grid: TimeGrid,
    /// `(n_steps + 1) x n_paths`, time-major like the ensemble.
    pub y: Array2<f64>,
    /// `n_steps x n_paths`.
    pub z: Array2<f64>,
    pub regressions: Vec<StepRegression>,
    pub route: Route,
    /// Clamp events per step (transformed route only).
    pub clamp_counts: Vec<usize>,
    /// Initial value from the regression recursion.
    pub y0: f64,
    /// Standard error from the pathwise estimator `g(X_T) + sum F dt`.
    pub y0_stderr: f64,
    /// Mean of the pathwise estimator, an independent check on `y0`.
    pub y0_pathwise: f64,
    pub warnings: Vec<String>,
}

impl BackwardSolution {
    /// Rows `t,mean_Y,stderr_Y,mean_Z,clamp_count`; `mean_Z` is empty on the last node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,mean_Y,stderr_Y,mean_Z,clamp_count")?;
        let n = self.grid.n_steps;
        for k in 0..=n {
            let (my, sy) = mean_and_stderr(self.y.row(k).iter().copied());
            let clamps = self.clamp_counts.get(k).copied().unwrap_or(0);
            if k < n {
                let (mz, _) = mean_and_stderr(self.z.row(k).iter().copied());
                writeln!(w, "{},{my},{sy},{mz},{clamps}", self.grid.time(k))?;
            } else {
                writeln!(w, "{},{my},{sy},,{clamps}", self.grid.time(k))?;
            }
        }
        Ok(())
    }
}

/// The driver seen by the backward recursion.
#[derive(Clone, Copy)]
pub enum DriverRef<'a> {
    Direct(&'a DriverSpec),
    Girsanov(&'a DriverSpec, &'a ForwardSpec),
}

impl DriverRef<'_> {
    pub fn eval(&self, t: f64, x: f64, y: f64, z: f64) -> Result<f64, ProblemError> {
        match *self {
            DriverRef::Direct(spec) => eval_driver(spec, t, x, y, z),
            DriverRef::Girsanov(spec, fwd) => eval_girsanov_driver(spec, fwd, t, x, y, z),
        }
    }

    fn spec(&self) -> &DriverSpec {
        match *self {
            DriverRef::Direct(spec) | DriverRef::Girsanov(spec, _) => spec,
        }
    }
}

struct Recursion<'a> {
    terminal: &'a (dyn Fn(f64) -> Result<f64, ProblemError> + Sync),
    driver: &'a (dyn Fn(f64, f64, f64, f64) -> Result<f64, ProblemError> + Sync),
    /// Keep values in `[U_FLOOR, 1]` and fail when too many are not positive.
    positive: bool,
    /// Lower bound `M` for Y on the untransformed routes (`-inf` for none).
    floor: f64,
}

struct RawSolution {
    y: Array2<f64>,
    z: Array2<f64>,
    regressions: Vec<StepRegression>,
    clamp_counts: Vec<usize>,
    pathwise: Vec<f64>,
}

fn check_ensemble(ens: &PathEnsemble, horizon: f64) -> Result<(), BsdeError> {
    if (ens.grid.t_end - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(BsdeError::Argument(format!(
            "ensemble ends at {} but the problem horizon is {horizon}",
            ens.grid.t_end
        )));
    }
    Ok(())
}

fn domain_warnings(ens: &PathEnsemble, basis: &BasisSpec) -> Vec<String> {
    let outside = ens.states.iter().filter(|&&x| x < basis.domain.0 || x > basis.domain.1).count();
    if outside > 0 {
        vec![format!(
            "{outside} sampled states fall outside the basis domain [{}, {}] and are clipped",
            basis.domain.0, basis.domain.1
        )]
    } else {
        Vec::new()
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_step_value(
    rec: &Recursion<'_>,
    scheme: BsdeScheme,
    t: f64,
    x: f64,
    cont: f64,
    z: f64,
    dt: f64,
    step: usize,
    path: usize,
) -> Result<f64, BsdeError> {
    let drv = |y: f64| (rec.driver)(t, x, y, z).map_err(|source| BsdeError::Problem { step, source });
    match scheme {
        BsdeScheme::Explicit => Ok(cont + drv(cont)? * dt),
        BsdeScheme::OneStepImplicit => {
            let mut y = cont + drv(cont)? * dt;
            for _ in 0..NEWTON_MAX_ITER {
                let resid = y - cont - drv(y)? * dt;
                let eta = 1e-6 * y.abs().max(1.0);
                let dfy = (drv(y + eta)? - drv(y - eta)?) / (2.0 * eta);
                let step_len = resid / (1.0 - dfy * dt);
                y -= step_len;
                if !y.is_finite() {
                    break;
                }
                if step_len.abs() <= NEWTON_TOL * y.abs().max(1.0) {
                    return Ok(y);
                }
            }
            Err(BsdeError::Newton { step, path })
        }
    }
}

/// The regression recursion. Arrays are time-major.
fn backward(ens: &PathEnsemble, basis: &BasisSpec, scheme: BsdeScheme, rec: &Recursion<'_>) -> Result<RawSolution, BsdeError> {
    let n = ens.n_steps();
    let n_paths = ens.n_paths();
    let dt = ens.grid.dt();
    let mut y = Array2::zeros((n + 1, n_paths));
    let mut z = Array2::zeros((n, n_paths));
    let mut clamp_counts = vec![0; n + 1];
    let terminal = ens
        .terminal()
        .iter()
        .map(|&x| (rec.terminal)(x).map_err(|source| BsdeError::Problem { step: n, source }))
        .collect::<Result<Vec<f64>, _>>()?;
    // a terminal value below M shows that M is not a bound for this problem
    let floor = if terminal.iter().all(|&v| v >= rec.floor) { rec.floor } else { f64::NEG_INFINITY };
    let clamp = |v: f64| if rec.positive { v.clamp(U_FLOOR, 1.0) } else { v.max(floor) };

    let mut next = Vec::with_capacity(n_paths);
    for v in terminal {
        let c = clamp(v);
        if c != v {
            clamp_counts[n] += 1;
        }
        next.push(c);
    }
    y.row_mut(n).assign(&ndarray::ArrayView1::from(&next));

    let mut regressions = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let t = ens.grid.time(k);
        let xs = ens.column(k).to_vec();
        let weighted: Vec<f64> = next.iter().zip(ens.dw.row(k)).map(|(v, w)| v * w / dt).collect();
        let step_basis = basis.fit_to(&xs);
        let (coefs, condition) = regress(&step_basis, &xs, &[&next, &weighted], k)?;
        let (cont_c, mart_c) = (&coefs[0], &coefs[1]);

        let values: Vec<Result<(f64, f64, f64), BsdeError>> = xs
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let cont = step_basis.predict(cont_c, x);
                let zi = step_basis.predict(mart_c, x);
                let start = if rec.positive { cont.max(U_FLOOR) } else { cont };
                let yi = solve_step_value(rec, scheme, t, x, start, zi, dt, k, i)?;
                Ok((cont, yi, zi))
            })
            .collect();
        let mut current = Vec::with_capacity(n_paths);
        let (mut clamps, mut nonpositive) = (0, 0);
        let mut zrow = z.row_mut(k);
        for (i, v) in values.into_iter().enumerate() {
            let (cont, yi, zi) = v?;
            if !yi.is_finite() || !zi.is_finite() {
                return Err(BsdeError::Diverged { step: k });
            }
            let c = clamp(yi);
            if rec.positive && (cont <= 0.0 || yi <= 0.0) {
                nonpositive += 1;
            }
            if c != yi || (rec.positive && cont <= 0.0) {
                clamps += 1;
            }
            current.push(c);
            zrow[i] = zi;
        }
        if nonpositive * 100 > n_paths {
            return Err(BsdeError::TransformBreakdown { step: k, count: nonpositive, n_paths });
        }
        clamp_counts[k] = clamps;
        y.row_mut(k).assign(&ndarray::ArrayView1::from(&current));
        regressions.push(StepRegression {
            basis: step_basis,
            continuation: cont_c.clone(),
            martingale: mart_c.clone(),
            condition,
        });
        next = current;
    }
    regressions.reverse();

    // pathwise estimator g(X_T) + sum_k F(t_k, X_k, Y_k, Z_k) dt
    let mut pathwise = y.row(n).to_vec();
    for k in 0..n {
        let t = ens.grid.time(k);
        let (xs, ys, zs) = (ens.column(k), y.row(k), z.row(k));
        let incr: Vec<Result<f64, BsdeError>> = (0..n_paths)
            .into_par_iter()
            .map(|i| (rec.driver)(t, xs[i], ys[i], zs[i]).map_err(|source| BsdeError::Problem { step: k, source }))
            .collect();
        for (acc, f) in pathwise.iter_mut().zip(incr) {
            *acc += f? * dt;
        }
    }

    Ok(RawSolution { y, z, regressions, clamp_counts, pathwise })
}

fn finish(raw: RawSolution, grid: TimeGrid, route: Route, warnings: Vec<String>) -> BackwardSolution {
    let (pathwise_mean, stderr) = mean_and_stderr(raw.pathwise.iter().copied());
    let y0 = raw.y.row(0).iter().sum::<f64>() / raw.y.ncols() as f64;
    BackwardSolution {
        grid,
        y0,
        y0_stderr: stderr,
        y0_pathwise: pathwise_mean,
        y: raw.y,
        z: raw.z,
        regressions: raw.regressions,
        route,
        clamp_counts: raw.clamp_counts,
        warnings,
    }
}

fn run_route(
    ens: &PathEnsemble,
    driver: DriverRef<'_>,
    basis: &BasisSpec,
    scheme: BsdeScheme,
    route: Route,
) -> Result<BackwardSolution, BsdeError> {
    let spec = driver.spec();
    let terminal = |x: f64| spec.terminal(x);
    let drv = |t: f64, x: f64, y: f64, z: f64| driver.eval(t, x, y, z);
    let rec = Recursion { terminal: &terminal, driver: &drv, positive: false, floor: spec.lower_bound };
    let raw = backward(ens, basis, scheme, &rec)?;
    Ok(finish(raw, ens.grid, route, domain_warnings(ens, basis)))
}

pub fn solve_lsmc(
    ens: &PathEnsemble,
    spec: &DriverSpec,
    basis: &BasisSpec,
    scheme: BsdeScheme,
) -> Result<BackwardSolution, BsdeError> {
    run_route(ens, DriverRef::Direct(spec), basis, scheme, Route::Direct)
}

/// Runs the shifted driver on an ensemble simulated without drift.
pub fn solve_girsanov(
    ens0: &PathEnsemble,
    spec: &DriverSpec,
    fwd: &ForwardSpec,
    basis: &BasisSpec,
    scheme: BsdeScheme,
) -> Result<BackwardSolution, BsdeError> {
    check_ensemble(ens0, fwd.horizon)?;
    for k in 0..ens0.n_steps() {
        let t = ens0.grid.time(k);
        for &x in ens0.column(k) {
            let s = fwd.diffusion(t, x).map_err(|source| BsdeError::Problem { step: k, source })?;
            if s.abs() < 1e-8 {
                return Err(BsdeError::Problem { step: k, source: ProblemError::ZeroDiffusion { t, x } });
            }
        }
    }
    run_route(ens0, DriverRef::Girsanov(spec, fwd), basis, scheme, Route::Girsanov)
}

/// Driver of the `U` equation, `dU = -G dt + Lambda dW`, with
/// `G = -U [ (H'/H) ln U + H f - H lambda(t, M - ln U / H) ] + h Lambda`.
pub fn transformed_driver(spec: &DriverSpec, t: f64, x: f64, u: f64, lam: f64) -> Result<f64, ProblemError> {
    let big_h = spec.h_of_t(t)?;
    let h_dot = spec.h_dot(t)?;
    let ln_u = u.ln();
    let f = spec.f.at(t, x);
    let h = spec.h.at(t, x);
    let lambda = spec.lambda_at(t, spec.lower_bound - ln_u / big_h)?;
    let g = -u * (h_dot / big_h * ln_u + big_h * f - big_h * lambda) + h * lam;
    if g.is_finite() {
        Ok(g)
    } else {
        Err(ProblemError::NonFinite { name: "transformed driver", t, x, y: u })
    }
}

/// `U = exp(-H(t) (y - M))`.
pub fn to_transformed(spec: &DriverSpec, t: f64, y: f64) -> Result<f64, ProblemError> {
    Ok((-spec.h_of_t(t)? * (y - spec.lower_bound)).exp())
}

/// `(Y, Z) = (M - ln U / H, -Lambda / (H U))`.
pub fn from_transformed(spec: &DriverSpec, t: f64, u: f64, lam: f64) -> Result<(f64, f64), ProblemError> {
    let big_h = spec.h_of_t(t)?;
    Ok((spec.lower_bound - u.ln() / big_h, -lam / (big_h * u)))
}

pub fn solve_transformed(
    ens: &PathEnsemble,
    spec: &DriverSpec,
    basis: &BasisSpec,
    scheme: BsdeScheme,
) -> Result<BackwardSolution, BsdeError> {
    if !spec.lower_bound.is_finite() {
        return Err(BsdeError::Argument("transformed route needs a finite lower bound M".into()));
    }
    for k in 0..=ens.n_steps() {
        let t = ens.grid.time(k);
        let big_h = spec.h_of_t(t).map_err(|source| BsdeError::Problem { step: k, source })?;
        if !(big_h > 0.0) {
            return Err(BsdeError::Argument(format!("transformed route needs H > 0, H({t}) = {big_h}")));
        }
    }
    let horizon = ens.grid.t_end;
    let terminal = |x: f64| -> Result<f64, ProblemError> { to_transformed(spec, horizon, spec.terminal(x)?) };
    let drv = |t: f64, x: f64, u: f64, lam: f64| transformed_driver(spec, t, x, u.max(U_FLOOR), lam);
    let rec = Recursion { terminal: &terminal, driver: &drv, positive: true, floor: f64::NEG_INFINITY };
    let n = ens.n_steps();
    let n_paths = ens.n_paths();
    let raw = backward(ens, basis, scheme, &rec)?;

    let mut y = Array2::zeros((n + 1, n_paths));
    let mut z = Array2::zeros((n, n_paths));
    for k in 0..=n {
        let t = ens.grid.time(k);
        for i in 0..n_paths {
            let u = raw.y[[k, i]];
            let lam = if k < n { raw.z[[k, i]] } else { 0.0 };
            let (yi, zi) = from_transformed(spec, t, u, lam).map_err(|source| BsdeError::Problem { step: k, source })?;
            y[[k, i]] = yi;
            if k < n {
                z[[k, i]] = zi;
            }
        }
    }
    let (u0_mean, u0_stderr) = mean_and_stderr(raw.pathwise.iter().copied());
    let u0 = raw.y.row(0).iter().sum::<f64>() / n_paths as f64;
    let h0 = spec.h_of_t(ens.grid.t_start).map_err(|source| BsdeError::Problem { step: 0, source })?;
    Ok(BackwardSolution {
        grid: ens.grid,
        y,
        z,
        regressions: raw.regressions,
        route: Route::Transformed,
        clamp_counts: raw.clamp_counts,
        y0: spec.lower_bound - u0.ln() / h0,
        // delta method through y = M - ln(u) / H
        y0_stderr: u0_stderr / (h0 * u0),
        y0_pathwise: spec.lower_bound - u0_mean.max(U_FLOOR).ln() / h0,
        warnings: domain_warnings(ens, basis),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResidual {
    pub mean: f64,
    pub stderr: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `e_k` for `k = 0..n_steps`.
    pub steps: Vec<StepResidual>,
    /// Fraction of steps with `|e_k| <= 4 stderr`.
    pub pass_fraction: f64,
    /// Nodes whose values look corrupted: a shift of `Y_j` moves `e_{j-1}`
    /// and `e_j` by equal and opposite amounts.
    pub suspect_nodes: Vec<usize>,
}

impl ResidualReport {
    pub fn flagged_steps(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, s)| s.flagged).map(|(k, _)| k).collect()
    }
}

const RESIDUAL_BAND: f64 = 4.0;

/// Per-step sample mean of `Y_{k+1} - Y_k + F(t_k, X_k, Y_k, Z_k) dt - Z_k dW_k`.
pub fn martingale_residual(sol: &BackwardSolution, driver: DriverRef<'_>, ens: &PathEnsemble) -> Result<ResidualReport, BsdeError> {
    let n = ens.n_steps();
    if sol.y.ncols() != ens.n_paths() || sol.grid != ens.grid {
        return Err(BsdeError::Argument("solution and ensemble are not aligned".into()));
    }
    let dt = ens.grid.dt();
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let t = ens.grid.time(k);
        let pairs: Vec<(f64, f64)> = (0..ens.n_paths())
            .map(|i| {
                let (yk, zk) = (sol.y[[k, i]], sol.z[[k, i]]);
                let f = driver.eval(t, ens.states[[k, i]], yk, zk).map_err(|source| BsdeError::Problem { step: k, source })?;
                let zdw = zk * ens.dw[[k, i]];
                Ok((sol.y[[k + 1, i]] - yk + f * dt - zdw, zdw))
            })
            .collect::<Result<_, BsdeError>>()?;
        let (mean, se_terms) = mean_and_stderr(pairs.iter().map(|p| p.0));
        // Y_k is fitted on the same paths, so its intercept absorbs the sample
        // mean of the increment; the fluctuation of e_k is then carried by the
        // Z dW average, which the pathwise spread alone does not see.
        let (_, se_zdw) = mean_and_stderr(pairs.iter().map(|p| p.1));
        let stderr = se_terms.hypot(se_zdw);
        let scale = sol.y.row(k).iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let flagged = mean.abs() > RESIDUAL_BAND * stderr + 1e-12 * scale;
        steps.push(StepResidual { mean, stderr, flagged });
    }
    let pass_fraction = steps.iter().filter(|s| !s.flagged).count() as f64 / n as f64;
    let mut suspect_nodes = Vec::new();
    for j in 0..=n {
        let before = j.checked_sub(1).map(|k| &steps[k]);
        let after = steps.get(j);
        let suspect = match (before, after) {
            (Some(b), Some(a)) => {
                b.flagged && a.flagged && b.mean * a.mean < 0.0 && (b.mean + a.mean).abs() < 0.5 * b.mean.abs().max(a.mean.abs())
            }
            // end nodes only touch one residual; flag them when the neighbour
            // is not explained by an interior node
            (None, Some(a)) => a.flagged && !steps.get(1).is_some_and(|s| s.flagged),
            (Some(b), None) => b.flagged && !(n >= 2 && steps[n - 2].flagged),
            (None, None) => false,
        };
        if suspect {
            suspect_nodes.push(j);
        }
    }
    Ok(ResidualReport { steps, pass_fraction, suspect_nodes })
}

/// Correlation between the increment-regression `Z` and the differentiated
/// estimate `sigma(t, x) d/dx E_k[Y_{k+1}]`, pooled over steps `1..n`.
pub fn z_consistency(sol: &BackwardSolution, spec: &DriverSpec, fwd: &ForwardSpec, ens: &PathEnsemble) -> Result<f64, BsdeError> {
    let n = ens.n_steps();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in 1..n {
        let reg = &sol.regressions[k];
        let t = ens.grid.time(k);
        for i in 0..ens.n_paths() {
            let x = ens.states[[k, i]];
            let sigma = fwd.diffusion(t, x).map_err(|source| BsdeError::Problem { step: k, source })?;
            let slope = reg.basis.predict_deriv(&reg.continuation, x);
            let diff = match sol.route {
                Route::Transformed => {
                    let u = reg.basis.predict(&reg.continuation, x).max(U_FLOOR);
                    let big_h = spec.h_of_t(t).map_err(|source| BsdeError::Problem { step: k, source })?;
                    -sigma * slope / (big_h * u)
                }
                _ => sigma * slope,
            };
            a.push(sol.z[[k, i]]);
            b.push(diff);
        }
    }
    Ok(crate::stats::correlation(&a, &b))
}
