//! The tracking control problem: Riccati baseline for the linear case,
//! feedback policies, and Monte Carlo cost comparison on common noise.

use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::pde::FeedbackGrid;
use crate::problem::{ControlProblemSpec, ProblemError};
use crate::sde::{controlled_simulate, FeedbackLaw, Scheme, SdeError, TimeGrid};
use crate::stats::mean_and_stderr;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("Riccati integration produced a non-finite value at t = {t}")]
    Integration { t: f64 },
    #[error(transparent)]
    Simulation(#[from] SdeError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub const DEFAULT_U_MAX: f64 = 1e6;

/// `v(t, x) = P(t) x^2 + q(t) x + r(t)` on a time grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub problem: ControlProblemSpec,
}

impl RiccatiSolution {
    pub fn value(&self, k: usize, x: f64) -> f64 {
        self.p[k] * x * x + self.q[k] * x + self.r[k]
    }

    pub fn initial_value(&self) -> f64 {
        self.value(0, self.problem.x0)
    }

    /// Linear interpolation in time of `(P, q)`.
    fn coefficients_at(&self, t: f64) -> (f64, f64) {
        let g = &self.grid;
        let s = ((t - g.t_start) / g.dt()).clamp(0.0, g.n_steps as f64);
        let k = (s.floor() as usize).min(g.n_steps - 1);
        let w = s - k as f64;
        ((1.0 - w) * self.p[k] + w * self.p[k + 1], (1.0 - w) * self.q[k] + w * self.q[k + 1])
    }

    /// `u*(t, x) = -B (2 P x + q) / (2 k1)`.
    pub fn feedback(&self, t: f64, x: f64) -> f64 {
        let (p, q) = self.coefficients_at(t);
        -self.problem.b.at_t(t) * (2.0 * p * x + q) / (2.0 * self.problem.k1.at_t(t))
    }

    /// The value function as a closure, e.g. a Dirichlet profile.
    pub fn profile(self: &Arc<Self>) -> impl Fn(f64, f64) -> f64 + Send + Sync + 'static {
        let me = Arc::clone(self);
        move |t, x| {
            let g = &me.grid;
            let s = ((t - g.t_start) / g.dt()).clamp(0.0, g.n_steps as f64);
            let k = (s.floor() as usize).min(g.n_steps - 1);
            let w = s - k as f64;
            (1.0 - w) * me.value(k, x) + w * me.value(k + 1, x)
        }
    }
}

/// Backward classical RK4 on
/// `P' = (B^2/k1) P^2 - 2 A P - 1`,
/// `q' = (B^2/k1) P q - A q + 2 xi`,
/// `r' = (B^2/(4 k1)) q^2 - sigma^2 P - xi^2`.
pub fn solve_riccati(cps: &ControlProblemSpec, tgrid: &TimeGrid) -> Result<RiccatiSolution, ControlError> {
    if cps.delta != 0.0 {
        return Err(ControlError::Argument(format!(
            "the quadratic value function requires delta = 0, got {}",
            cps.delta
        )));
    }
    if (tgrid.t_end - cps.horizon).abs() > 1e-12 * cps.horizon.max(1.0) {
        return Err(ControlError::Argument(format!("time grid ends at {} but T = {}", tgrid.t_end, cps.horizon)));
    }
    cps.validate(tgrid.n_steps + 1)?;
    let rhs = |t: f64, s: [f64; 3]| -> [f64; 3] {
        let a = cps.a.at_t(t);
        let b = cps.b.at_t(t);
        let k1 = cps.k1.at_t(t);
        let sig = cps.sigma.at_t(t);
        let xi = cps.xi.at_t(t);
        let c = b * b / k1;
        let [p, q, _] = s;
        [c * p * p - 2.0 * a * p - 1.0, c * p * q - a * q + 2.0 * xi, 0.25 * c * q * q - sig * sig * p - xi * xi]
    };
    let n = tgrid.n_steps;
    let xi_t = cps.xi.at_t(cps.horizon);
    let mut p = vec![0.0; n + 1];
    let mut q = vec![0.0; n + 1];
    let mut r = vec![0.0; n + 1];
    let mut s = [cps.k2, -2.0 * cps.k2 * xi_t, cps.k2 * xi_t * xi_t];
    (p[n], q[n], r[n]) = (s[0], s[1], s[2]);
    let h = -tgrid.dt();
    let axpy = |s: [f64; 3], k: [f64; 3], c: f64| [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2]];
    for k in (0..n).rev() {
        let t = tgrid.time(k + 1);
        let k1 = rhs(t, s);
        let k2 = rhs(t + 0.5 * h, axpy(s, k1, 0.5 * h));
        let k3 = rhs(t + 0.5 * h, axpy(s, k2, 0.5 * h));
        let k4 = rhs(t + h, axpy(s, k3, h));
        for j in 0..3 {
            s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::Integration { t: tgrid.time(k) });
        }
        (p[k], q[k], r[k]) = (s[0], s[1], s[2]);
    }
    Ok(RiccatiSolution { grid: *tgrid, p, q, r, problem: cps.clone() })
}

#[derive(Debug, Clone)]
pub enum ControlPolicy {
    Zero,
    Constant(f64),
    FeedbackGrid(Arc<FeedbackGrid>),
    RiccatiFeedback(Arc<RiccatiSolution>),
}

impl ControlPolicy {
    /// Unclamped control value.
    pub fn control(&self, t: f64, x: f64) -> f64 {
        match self {
            ControlPolicy::Zero => 0.0,
            ControlPolicy::Constant(c) => *c,
            ControlPolicy::FeedbackGrid(g) => g.control(t, x),
            ControlPolicy::RiccatiFeedback(r) => r.feedback(t, x),
        }
    }

    pub fn clamped(&self, u_max: f64) -> Clamped<'_> {
        Clamped { policy: self, u_max }
    }

    pub fn label(&self) -> String {
        match self {
            ControlPolicy::Zero => "zero".into(),
            ControlPolicy::Constant(c) => format!("constant({c})"),
            ControlPolicy::FeedbackGrid(_) => "pde_feedback".into(),
            ControlPolicy::RiccatiFeedback(_) => "riccati_feedback".into(),
        }
    }
}

/// A policy restricted to `|u| <= u_max`.
pub struct Clamped<'a> {
    policy: &'a ControlPolicy,
    u_max: f64,
}

impl FeedbackLaw for Clamped<'_> {
    fn control(&self, t: f64, x: f64) -> f64 {
        let u = self.policy.control(t, x);
        if u.is_nan() {
            0.0
        } else {
            u.clamp(-self.u_max, self.u_max)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Cost of each path in path order, for pairing across policies.
    pub per_path: Vec<f64>,
}

/// Euler for the linear problem, tamed Euler under the cubic drift.
pub fn default_scheme(cps: &ControlProblemSpec) -> Scheme {
    if cps.delta > 0.0 {
        Scheme::TamedEuler
    } else {
        Scheme::Euler
    }
}

pub fn estimate_cost(
    cps: &ControlProblemSpec,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate, ControlError> {
    estimate_cost_clamped(cps, policy, grid, n_paths, seed, DEFAULT_U_MAX)
}

/// Left-endpoint quadrature of the running cost plus the terminal cost.
pub fn estimate_cost_clamped(
    cps: &ControlProblemSpec,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    u_max: f64,
) -> Result<CostEstimate, ControlError> {
    if !(u_max > 0.0) {
        return Err(ControlError::Argument(format!("u_max must be positive, got {u_max}")));
    }
    let law = policy.clamped(u_max);
    let ens = controlled_simulate(cps, &law, grid, n_paths, seed, default_scheme(cps))?;
    let dt = grid.dt();
    let times = grid.times();
    let per_path: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let row = ens.path(i);
            let running: f64 = (0..grid.n_steps)
                .map(|k| {
                    let (t, x) = (times[k], row[k]);
                    cps.running_cost(t, x, law.control(t, x))
                })
                .sum();
            running * dt + cps.terminal_cost(row[grid.n_steps])
        })
        .collect();
    let (mean, stderr) = mean_and_stderr(per_path.iter().copied());
    Ok(CostEstimate { mean, stderr, per_path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub name: String,
    pub mean_cost: f64,
    pub stderr: f64,
    /// Mean of `J_policy - J_best` over paired paths.
    pub paired_diff_vs_best: f64,
    pub paired_stderr: f64,
}

/// Policies in increasing order of estimated cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub rows: Vec<PolicyRow>,
}

impl PolicyTable {
    pub fn best(&self) -> &PolicyRow {
        &self.rows[0]
    }

    pub fn row(&self, name: &str) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "policy,mean_cost,stderr,paired_diff_vs_best")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.name, r.mean_cost, r.stderr, r.paired_diff_vs_best)?;
        }
        Ok(())
    }
}

/// Evaluates every policy on the same Brownian increments.
pub fn compare_policies(
    cps: &ControlProblemSpec,
    policies: &[(String, ControlPolicy)],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PolicyTable, ControlError> {
    compare_policies_with(cps, policies, grid, n_paths, seed, DEFAULT_U_MAX)
}

/// As [`compare_policies`] with every control clamped to `|u| <= u_max`.
pub fn compare_policies_with(
    cps: &ControlProblemSpec,
    policies: &[(String, ControlPolicy)],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    u_max: f64,
) -> Result<PolicyTable, ControlError> {
    if policies.len() < 2 {
        return Err(ControlError::Argument("compare_policies needs at least two policies".into()));
    }
    let costs = policies
        .iter()
        .map(|(_, p)| estimate_cost_clamped(cps, p, grid, n_paths, seed, u_max))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..policies.len()).collect();
    order.sort_by(|&a, &b| costs[a].mean.total_cmp(&costs[b].mean));
    let best = &costs[order[0]];
    let rows = order
        .iter()
        .map(|&j| {
            let (diff, se) = mean_and_stderr(costs[j].per_path.iter().zip(&best.per_path).map(|(a, b)| a - b));
            PolicyRow {
                name: policies[j].0.clone(),
                mean_cost: costs[j].mean,
                stderr: costs[j].stderr,
                paired_diff_vs_best: diff,
                paired_stderr: se,
            }
        })
        .collect();
    Ok(PolicyTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    #[test]
    fn benchmark_riccati_matches_closed_form() {
        let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
        let sol = solve_riccati(&cps, &TimeGrid::new(0.0, 1.0, 100).unwrap()).unwrap();
        assert!((sol.p[0] - 1f64.tanh()).abs() < 1e-9);
        assert!((sol.r[0] - 1f64.cosh().ln()).abs() < 1e-9);
        assert!(sol.q.iter().all(|&q| q == 0.0));
        assert!(sol.p.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn uncontrollable_case_is_linear() {
        let mut cps = ControlProblemSpec::benchmark(0.0, 0.0, 1.0);
        cps.b = Expr::Const(0.0);
        let sol = solve_riccati(&cps, &TimeGrid::new(0.0, 1.0, 10).unwrap()).unwrap();
        assert!((sol.p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_cubic_drift() {
        let cps = ControlProblemSpec::benchmark(0.1, 1.0, 1.0);
        assert!(matches!(
            solve_riccati(&cps, &TimeGrid::new(0.0, 1.0, 10).unwrap()),
            Err(ControlError::Argument(_))
        ));
    }

    #[test]
    fn resting_on_target_costs_nothing() {
        let mut cps = ControlProblemSpec::benchmark(0.0, 0.7, 1.0);
        cps.sigma = Expr::Const(0.0);
        cps.xi = Expr::Const(0.7);
        let est = estimate_cost(&cps, &ControlPolicy::Zero, &TimeGrid::new(0.0, 1.0, 20).unwrap(), 10, 1).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn duplicated_policy_has_zero_paired_difference() {
        let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let ric = Arc::new(solve_riccati(&cps, &grid).unwrap());
        let pols = vec![
            ("a".to_string(), ControlPolicy::RiccatiFeedback(ric.clone())),
            ("b".to_string(), ControlPolicy::RiccatiFeedback(ric)),
        ];
        let table = compare_policies(&cps, &pols, &grid, 500, 3).unwrap();
        assert!(table.rows.iter().all(|r| r.paired_diff_vs_best == 0.0));
    }

    #[test]
    fn clamp_bounds_the_control() {
        let p = ControlPolicy::Constant(5.0);
        assert_eq!(p.clamped(2.0).control(0.0, 0.0), 2.0);
    }
}
