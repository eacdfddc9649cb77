//! Forward simulation on uniform time grids.
//!
//! Brownian increments come from a ChaCha8 stream keyed by `(seed, path)`,
//! so path `i` is the same whatever the ensemble size or thread count.

use std::io::{self, Write};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{ControlProblemSpec, ForwardSpec, ProblemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite state on path {path} at step {step}; the tamed scheme may help")]
    Explosion { path: usize, step: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self, SdeError> {
        if n_steps == 0 {
            return Err(SdeError::Argument("time grid needs at least one step".into()));
        }
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(SdeError::Argument(format!("time interval [{t_start}, {t_end}] is empty")));
        }
        Ok(TimeGrid { t_start, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + self.dt() * k as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    pub fn refined(&self) -> TimeGrid {
        TimeGrid { n_steps: self.n_steps * 2, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    /// Drift replaced by `mu / (1 + dt |mu|)`.
    TamedEuler,
}

impl Scheme {
    fn drift_term(self, mu: f64, dt: f64) -> f64 {
        match self {
            Scheme::Euler => mu,
            Scheme::TamedEuler => mu / (1.0 + dt * mu.abs()),
        }
    }
}

/// A state feedback `u(t, x)`.
pub trait FeedbackLaw: Sync {
    fn control(&self, t: f64, x: f64) -> f64;
}

impl<F> FeedbackLaw for F
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    fn control(&self, t: f64, x: f64) -> f64 {
        self(t, x)
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    /// `(n_steps + 1) x n_paths`: row `k` is the cross-section at `t_k`.
    pub states: Array2<f64>,
    /// `n_steps x n_paths`.
    pub dw: Array2<f64>,
    pub seed: u64,
    pub scheme: Scheme,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.states.ncols()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn column(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.states.row(k)
    }

    /// States of one path.
    pub fn path(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.states.column(i)
    }

    pub fn terminal(&self) -> ndarray::ArrayView1<'_, f64> {
        self.states.row(self.grid.n_steps)
    }

    /// Sample mean of `X_T^p`.
    pub fn terminal_moment(&self, p: i32) -> f64 {
        self.terminal().iter().map(|x| x.powi(p)).sum::<f64>() / self.n_paths() as f64
    }

    /// Increments of the same Brownian paths on the grid with half as many steps.
    pub fn coarsened_increments(&self) -> Result<Array2<f64>, SdeError> {
        if self.grid.n_steps % 2 != 0 {
            return Err(SdeError::Argument("coarsening needs an even number of steps".into()));
        }
        let half = self.grid.n_steps / 2;
        Ok(Array2::from_shape_fn((half, self.n_paths()), |(k, i)| self.dw[[2 * k, i]] + self.dw[[2 * k + 1, i]]))
    }

    /// Rows `path_id,t,X,dW`; `dW` is empty on the terminal node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path_id,t,X,dW")?;
        let n = self.grid.n_steps;
        for (i, row) in self.states.axis_iter(Axis(1)).enumerate() {
            for k in 0..=n {
                if k < n {
                    writeln!(w, "{i},{},{},{}", self.grid.time(k), row[k], self.dw[[k, i]])?;
                } else {
                    writeln!(w, "{i},{},{},", self.grid.time(k), row[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Increments for one path: `sqrt(dt) N_k` from the `(seed, path)` stream.
pub fn path_increments(seed: u64, path: usize, grid: &TimeGrid) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let sd = grid.dt().sqrt();
    (0..grid.n_steps)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
}

pub fn brownian_increments(seed: u64, n_paths: usize, grid: &TimeGrid) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = (0..n_paths).into_par_iter().map(|i| path_increments(seed, i, grid)).collect();
    let mut out = Array2::zeros((grid.n_steps, n_paths));
    for (i, row) in rows.into_iter().enumerate() {
        out.column_mut(i).assign(&ndarray::Array1::from(row));
    }
    out
}

fn check_paths(n_paths: usize) -> Result<(), SdeError> {
    if n_paths == 0 {
        return Err(SdeError::Argument("n_paths must be at least 1".into()));
    }
    Ok(())
}

/// Integrates one path; `drift(t, x)` is the full (possibly controlled) drift.
fn integrate_path<D>(
    x0: f64,
    grid: &TimeGrid,
    dw: &[f64],
    scheme: Scheme,
    drift: &D,
    sigma: &dyn Fn(f64, f64) -> Result<f64, ProblemError>,
    path: usize,
) -> Result<Vec<f64>, SdeError>
where
    D: Fn(f64, f64) -> Result<f64, ProblemError> + ?Sized,
{
    let dt = grid.dt();
    let mut xs = Vec::with_capacity(grid.n_steps + 1);
    let mut x = x0;
    xs.push(x);
    for (k, &dwk) in dw.iter().enumerate() {
        let t = grid.time(k);
        let mu = match drift(t, x) {
            Err(ProblemError::NonFinite { .. }) => return Err(SdeError::Explosion { path, step: k + 1 }),
            other => other?,
        };
        x += scheme.drift_term(mu, dt) * dt + sigma(t, x)? * dwk;
        if !x.is_finite() {
            return Err(SdeError::Explosion { path, step: k + 1 });
        }
        xs.push(x);
    }
    Ok(xs)
}

fn assemble(rows: Vec<Result<Vec<f64>, SdeError>>, n_steps: usize) -> Result<Array2<f64>, SdeError> {
    let mut states = Array2::zeros((n_steps + 1, rows.len()));
    for (i, row) in rows.into_iter().enumerate() {
        states.column_mut(i).assign(&ndarray::Array1::from(row?));
    }
    Ok(states)
}

pub fn simulate(
    fwd: &ForwardSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<PathEnsemble, SdeError> {
    check_paths(n_paths)?;
    let dw = brownian_increments(seed, n_paths, grid);
    simulate_with_increments(fwd, grid, dw, seed, scheme)
}

/// Simulates on caller-supplied increments (e.g. coarsened ones).
pub fn simulate_with_increments(
    fwd: &ForwardSpec,
    grid: &TimeGrid,
    dw: Array2<f64>,
    seed: u64,
    scheme: Scheme,
) -> Result<PathEnsemble, SdeError> {
    check_paths(dw.ncols())?;
    if dw.nrows() != grid.n_steps {
        return Err(SdeError::Argument(format!("{} increments per path for {} steps", dw.nrows(), grid.n_steps)));
    }
    let drift = |t: f64, x: f64| fwd.drift(t, x);
    let sigma = |t: f64, x: f64| fwd.diffusion(t, x);
    let rows: Vec<_> = (0..dw.ncols())
        .into_par_iter()
        .map(|i| {
            let incs = dw.column(i).to_vec();
            integrate_path(fwd.x0, grid, &incs, scheme, &drift, &sigma, i)
        })
        .collect();
    let states = assemble(rows, grid.n_steps)?;
    Ok(PathEnsemble { grid: *grid, states, dw, seed, scheme })
}

/// `dX = (mu + B u) dt + sigma dW` with `u` from the feedback law.
pub fn controlled_simulate(
    cps: &ControlProblemSpec,
    policy: &dyn FeedbackLaw,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<PathEnsemble, SdeError> {
    check_paths(n_paths)?;
    let dw = brownian_increments(seed, n_paths, grid);
    let fwd = cps.forward();
    let drift = |t: f64, x: f64| -> Result<f64, ProblemError> {
        let u = policy.control(t, x);
        let b = cps.b.at(t, x);
        let total = fwd.drift(t, x)? + b * u;
        if total.is_finite() {
            Ok(total)
        } else {
            Err(ProblemError::NonFinite { name: "controlled drift", t, x, y: 0.0 })
        }
    };
    let sigma = |t: f64, x: f64| fwd.diffusion(t, x);
    let rows: Vec<_> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let incs = dw.column(i).to_vec();
            integrate_path(cps.x0, grid, &incs, scheme, &drift, &sigma, i)
        })
        .collect();
    let states = assemble(rows, grid.n_steps)?;
    Ok(PathEnsemble { grid: *grid, states, dw, seed, scheme })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn fwd(mu: &str, sigma: &str, x0: f64) -> ForwardSpec {
        ForwardSpec::new(Expr::parse(mu).unwrap(), Expr::parse(sigma).unwrap(), x0, 1.0).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn no_dynamics_keeps_initial_state() {
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let ens = simulate(&fwd("0", "0", 1.5), &g, 10, 3, Scheme::Euler).unwrap();
        assert!(ens.states.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn zero_paths_rejected() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert!(simulate(&fwd("0", "1", 0.0), &g, 0, 1, Scheme::Euler).is_err());
    }

    #[test]
    fn path_is_independent_of_ensemble_size() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let f = fwd("-x", "1", 0.5);
        let small = simulate(&f, &g, 3, 11, Scheme::TamedEuler).unwrap();
        let large = simulate(&f, &g, 50, 11, Scheme::TamedEuler).unwrap();
        for i in 0..3 {
            assert_eq!(small.path(i), large.path(i));
        }
        let other = simulate(&f, &g, 3, 12, Scheme::TamedEuler).unwrap();
        assert_ne!(small.path(0), other.path(0));
    }

    #[test]
    fn brownian_states_are_cumulative_increments() {
        let g = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let ens = simulate(&fwd("0", "1", 0.0), &g, 20, 5, Scheme::Euler).unwrap();
        for i in 0..20 {
            let mut acc = 0.0;
            for k in 0..32 {
                acc += ens.dw[[k, i]];
                assert_eq!(ens.states[[k + 1, i]], acc);
            }
        }
    }

    #[test]
    fn explosion_is_reported_with_location() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let err = simulate(&fwd("x^3", "0", 10.0), &g, 2, 1, Scheme::Euler).unwrap_err();
        assert!(matches!(err, SdeError::Explosion { path: 0, .. }));
        assert!(simulate(&fwd("x^3", "0", 10.0), &g, 2, 1, Scheme::TamedEuler).is_ok());
    }

    #[test]
    fn coarsening_matches_summed_increments() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ens = simulate(&fwd("0", "1", 0.0), &g, 4, 9, Scheme::Euler).unwrap();
        let coarse = ens.coarsened_increments().unwrap();
        let coarse_grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let c = simulate_with_increments(&fwd("0", "1", 0.0), &coarse_grid, coarse, 9, Scheme::Euler).unwrap();
        for i in 0..4 {
            for k in 0..=4 {
                assert!((c.states[[k, i]] - ens.states[[2 * k, i]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let ens = simulate(&fwd("0", "0", 1.0), &g, 1, 1, Scheme::Euler).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,X,dW");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
    }
}
