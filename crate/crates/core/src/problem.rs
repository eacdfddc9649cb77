//! Problem definitions: the forward diffusion, the quadratic driver and the
//! tracking control problem, plus a sampled checker for the
//! uniqueness hypothesis on the driver.

use std::fmt;

use thiserror::Error;

use crate::expr::{Expr, Var, Vars};
use crate::kappa::Modulus;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("coefficient `{name}` is not finite at t={t}, x={x}, y={y}")]
    NonFinite { name: &'static str, t: f64, x: f64, y: f64 },
    #[error("sigma vanishes at t={t}, x={x}: drift-eliminated representation inapplicable")]
    ZeroDiffusion { t: f64, x: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn finite(name: &'static str, value: f64, t: f64, x: f64, y: f64) -> Result<f64, ProblemError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ProblemError::NonFinite { name, t, x, y })
    }
}

/// Forward diffusion `dX = mu(t,X) dt + sigma(t,X) dW`, `X(0) = x0`.
#[derive(Debug, Clone)]
pub struct ForwardSpec {
    pub mu: Expr,
    pub sigma: Expr,
    pub x0: f64,
    pub horizon: f64,
    /// Parabolicity floor `c` with `sigma >= c > 0`, when the problem claims one.
    pub parabolic_floor: Option<f64>,
}

impl ForwardSpec {
    pub fn new(mu: Expr, sigma: Expr, x0: f64, horizon: f64) -> Result<Self, ProblemError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProblemError::Argument(format!("horizon T must be positive, got {horizon}")));
        }
        if !x0.is_finite() {
            return Err(ProblemError::Argument(format!("x0 must be finite, got {x0}")));
        }
        Ok(ForwardSpec { mu, sigma, x0, horizon, parabolic_floor: None })
    }

    pub fn with_parabolic_floor(mut self, c: f64) -> Self {
        self.parabolic_floor = Some(c);
        self
    }

    /// Same diffusion with the drift removed.
    pub fn driftless(&self) -> ForwardSpec {
        ForwardSpec { mu: Expr::Const(0.0), ..self.clone() }
    }

    pub fn drift(&self, t: f64, x: f64) -> Result<f64, ProblemError> {
        finite("mu", self.mu.at(t, x), t, x, 0.0)
    }

    pub fn diffusion(&self, t: f64, x: f64) -> Result<f64, ProblemError> {
        finite("sigma", self.sigma.at(t, x), t, x, 0.0)
    }
}

/// Driver `F(t,x,y,z) = f(t,x) + h(t,x) z - lambda(t,y) - H(t) z^2 / 2` with
/// terminal function `g` and an a priori lower bound `M` for `Y`.
#[derive(Debug, Clone)]
pub struct DriverSpec {
    pub f: Expr,
    pub h: Expr,
    /// Function of `(t, y)`.
    pub lambda: Expr,
    /// Function of `t` only.
    pub big_h: Expr,
    /// Function of `x` only.
    pub g: Expr,
    pub lower_bound: f64,
}

impl DriverSpec {
    pub fn new(f: Expr, h: Expr, lambda: Expr, big_h: Expr, g: Expr) -> Self {
        DriverSpec { f, h, lambda, big_h, g, lower_bound: 0.0 }
    }

    pub fn with_lower_bound(mut self, m: f64) -> Self {
        self.lower_bound = m;
        self
    }

    pub fn depends_on_y(&self) -> bool {
        self.lambda.as_constant() != Some(0.0) && self.lambda.depends_on(Var::Y)
    }

    pub fn h_of_t(&self, t: f64) -> Result<f64, ProblemError> {
        finite("H", self.big_h.at_t(t), t, 0.0, 0.0)
    }

    /// dH/dt by central differences on the expression.
    pub fn h_dot(&self, t: f64) -> Result<f64, ProblemError> {
        if !self.big_h.depends_on(Var::T) {
            return Ok(0.0);
        }
        let eta = 1e-6 * t.abs().max(1.0);
        let d = (self.big_h.at_t(t + eta) - self.big_h.at_t(t - eta)) / (2.0 * eta);
        finite("dH/dt", d, t, 0.0, 0.0)
    }

    pub fn terminal(&self, x: f64) -> Result<f64, ProblemError> {
        finite("g", self.g.at(0.0, x), 0.0, x, 0.0)
    }

    pub fn lambda_at(&self, t: f64, y: f64) -> Result<f64, ProblemError> {
        finite("lambda", self.lambda.eval(Vars::ty(t, y)), t, 0.0, y)
    }

    /// d lambda / dy by central differences; zero when lambda ignores y.
    pub fn lambda_dy(&self, t: f64, y: f64) -> Result<f64, ProblemError> {
        if !self.lambda.depends_on(Var::Y) {
            return Ok(0.0);
        }
        let eta = 1e-6 * y.abs().max(1.0);
        let d = (self.lambda.eval(Vars::ty(t, y + eta)) - self.lambda.eval(Vars::ty(t, y - eta))) / (2.0 * eta);
        finite("dlambda/dy", d, t, 0.0, y)
    }

    /// Partial derivative of the driver in `z`: `h - H z`.
    pub fn driver_dz(&self, t: f64, x: f64, z: f64) -> Result<f64, ProblemError> {
        let h = finite("h", self.h.at(t, x), t, x, 0.0)?;
        Ok(h - self.h_of_t(t)? * z)
    }
}

/// Evaluates the quadratic driver.
pub fn eval_driver(spec: &DriverSpec, t: f64, x: f64, y: f64, z: f64) -> Result<f64, ProblemError> {
    let f = finite("f", spec.f.at(t, x), t, x, y)?;
    let h = finite("h", spec.h.at(t, x), t, x, y)?;
    let lambda = spec.lambda_at(t, y)?;
    let big_h = spec.h_of_t(t)?;
    Ok(f + h * z - lambda - 0.5 * big_h * z * z)
}

/// Driver of the drift-eliminated representation: `F + (mu / sigma) z`.
pub fn eval_girsanov_driver(
    spec: &DriverSpec,
    fwd: &ForwardSpec,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
) -> Result<f64, ProblemError> {
    let sigma = fwd.diffusion(t, x)?;
    if sigma == 0.0 {
        return Err(ProblemError::ZeroDiffusion { t, x });
    }
    Ok(eval_driver(spec, t, x, y, z)? + fwd.drift(t, x)? / sigma * z)
}

/// The tracking problem with cubic drift perturbation:
/// `dX = (A X - delta X^3 + B u) dt + sigma dW` and running cost
/// `(X - xi)^2 + k1 u^2`, terminal cost `k2 (X_T - xi(T))^2`.
#[derive(Debug, Clone)]
pub struct ControlProblemSpec {
    pub a: Expr,
    pub b: Expr,
    pub sigma: Expr,
    pub delta: f64,
    pub xi: Expr,
    pub k1: Expr,
    pub k2: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl ControlProblemSpec {
    /// The scalar benchmark `A = 0, B = 1, k1 = 1, xi = 0, k2 = 0, sigma = 1`.
    pub fn benchmark(delta: f64, x0: f64, horizon: f64) -> Self {
        ControlProblemSpec {
            a: Expr::Const(0.0),
            b: Expr::Const(1.0),
            sigma: Expr::Const(1.0),
            delta,
            xi: Expr::Const(0.0),
            k1: Expr::Const(1.0),
            k2: 0.0,
            x0,
            horizon,
        }
    }

    /// Checks the structural requirements on a sample of `n` times.
    pub fn validate(&self, n: usize) -> Result<(), ProblemError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ProblemError::Argument(format!("horizon T must be positive, got {}", self.horizon)));
        }
        if !(self.delta >= 0.0) {
            return Err(ProblemError::Argument(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.k2 >= 0.0) {
            return Err(ProblemError::Argument(format!("k2 must be >= 0, got {}", self.k2)));
        }
        for t in sample_times(self.horizon, n.max(2)) {
            if !(self.k1.at_t(t) > 0.0) {
                return Err(ProblemError::Argument(format!("k1 must be positive, k1({t}) = {}", self.k1.at_t(t))));
            }
            if !(self.sigma.at_t(t).abs() > 0.0) {
                return Err(ProblemError::Argument(format!("sigma must not vanish, sigma({t}) = 0")));
            }
        }
        Ok(())
    }

    /// `mu(t, x) = A(t) x - delta x^3`.
    pub fn uncontrolled_drift(&self) -> Expr {
        self.a.clone() * Expr::x() - self.delta * Expr::x().powi(3)
    }

    pub fn forward(&self) -> ForwardSpec {
        ForwardSpec {
            mu: self.uncontrolled_drift(),
            sigma: self.sigma.clone(),
            x0: self.x0,
            horizon: self.horizon,
            parabolic_floor: None,
        }
    }

    /// `H(t) = B^2 / (2 k1 sigma^2)`.
    pub fn quadratic_coefficient(&self) -> Expr {
        self.b.clone().powi(2) / (2.0 * self.k1.clone() * self.sigma.clone().powi(2))
    }

    /// The driver of the value-function BSDE along the uncontrolled state:
    /// `f = (x - xi)^2`, `h = 0`, `lambda = 0`, `H = B^2 / (2 k1 sigma^2)`,
    /// `g = k2 (x - xi(T))^2`.
    pub fn driver(&self) -> DriverSpec {
        let xi_t = self.xi.at_t(self.horizon);
        DriverSpec {
            f: (Expr::x() - self.xi.clone()).powi(2),
            h: Expr::Const(0.0),
            lambda: Expr::Const(0.0),
            big_h: self.quadratic_coefficient(),
            g: self.k2 * (Expr::x() - xi_t).powi(2),
            lower_bound: 0.0,
        }
    }

    pub fn running_cost(&self, t: f64, x: f64, u: f64) -> f64 {
        let d = x - self.xi.at_t(t);
        d * d + self.k1.at_t(t) * u * u
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        let d = x - self.xi.at_t(self.horizon);
        self.k2 * d * d
    }
}

/// Sampling resolution for the hypothesis checker.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub n_t: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    /// Points per axis of the `(u, v)` sample in `(0, 1]^2`.
    pub n_uv: usize,
}

impl SamplingGrid {
    pub fn new(n_t: usize, x_lo: f64, x_hi: f64, n_x: usize, n_uv: usize) -> Self {
        SamplingGrid { n_t, x_lo, x_hi, n_x, n_uv }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        if self.n_t == 0 || self.n_x == 0 || self.n_uv == 0 {
            return Err(ProblemError::Argument("sampling grid is empty".into()));
        }
        if !(self.x_lo <= self.x_hi) {
            return Err(ProblemError::Argument(format!("x range [{}, {}] is empty", self.x_lo, self.x_hi)));
        }
        Ok(())
    }

    fn xs(&self) -> Vec<f64> {
        linspace(self.x_lo, self.x_hi, self.n_x)
    }

    fn uvs(&self) -> Vec<f64> {
        (1..=self.n_uv).map(|i| i as f64 / self.n_uv as f64).collect()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn sample_times(horizon: f64, n: usize) -> Vec<f64> {
    linspace(0.0, horizon, n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Witness {
    Time { t: f64 },
    Point { t: f64, x: f64 },
    Pair { t: f64, u: f64, v: f64 },
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::Time { t } => write!(f, "t={t}"),
            Witness::Point { t, x } => write!(f, "t={t}, x={x}"),
            Witness::Pair { t, u, v } => write!(f, "t={t}, u={u}, v={v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    /// No violation on the sample; evidence, not proof.
    Satisfied,
    Violated { witness: Witness, detail: String },
}

impl Verdict {
    pub fn holds(&self) -> bool {
        matches!(self, Verdict::Satisfied)
    }

    pub fn witness(&self) -> Option<Witness> {
        match self {
            Verdict::Satisfied => None,
            Verdict::Violated { witness, .. } => Some(*witness),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clause {
    PositiveH,
    NonnegativeF,
    LambdaModulus,
    TerminalLowerBound,
    BoundedH,
    Dominance,
}

impl Clause {
    pub const ALL: [Clause; 6] = [
        Clause::PositiveH,
        Clause::NonnegativeF,
        Clause::LambdaModulus,
        Clause::TerminalLowerBound,
        Clause::BoundedH,
        Clause::Dominance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Clause::PositiveH => "(i)",
            Clause::NonnegativeF => "(ii)",
            Clause::LambdaModulus => "(iii)",
            Clause::TerminalLowerBound => "(iv)",
            Clause::BoundedH => "(v)",
            Clause::Dominance => "(v)'",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Clause::PositiveH => "H positive, bounded away from zero, C^1",
            Clause::NonnegativeF => "f >= 0",
            Clause::LambdaModulus => "lambda modulus inequality",
            Clause::TerminalLowerBound => "g bounded below by M",
            Clause::BoundedH => "h bounded",
            Clause::Dominance => "2 H f - h^2 / gamma >= 0",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub verdicts: Vec<(Clause, Verdict)>,
    pub resolution: SamplingGrid,
    pub gamma: f64,
}

impl ConditionReport {
    pub fn verdict(&self, clause: Clause) -> &Verdict {
        &self.verdicts.iter().find(|(c, _)| *c == clause).expect("every clause is reported").1
    }

    /// (i)-(iv) together with (v) or (v)'.
    pub fn uniqueness_hypothesis_holds(&self) -> bool {
        let core = [Clause::PositiveH, Clause::NonnegativeF, Clause::LambdaModulus, Clause::TerminalLowerBound]
            .iter()
            .all(|c| self.verdict(*c).holds());
        core && (self.verdict(Clause::BoundedH).holds() || self.verdict(Clause::Dominance).holds())
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (clause, verdict) in &self.verdicts {
            match verdict {
                Verdict::Satisfied => {
                    out.push_str(&format!("{:<5} PASS  {}\n", clause.label(), clause.description()))
                }
                Verdict::Violated { witness, detail } => out.push_str(&format!(
                    "{:<5} FAIL  {} at {witness}: {detail}\n",
                    clause.label(),
                    clause.description()
                )),
            }
        }
        out.push_str(&format!(
            "resolution: n_t={} x=[{}, {}] n_x={} n_uv={} gamma={}\n",
            self.resolution.n_t,
            self.resolution.x_lo,
            self.resolution.x_hi,
            self.resolution.n_x,
            self.resolution.n_uv,
            self.gamma
        ));
        out.push_str(&format!(
            "uniqueness hypothesis: {}\n",
            if self.uniqueness_hypothesis_holds() { "satisfied on sample" } else { "violated" }
        ));
        out
    }
}

/// Inputs of the hypothesis checker besides the problem itself.
pub struct ConditionInputs<'a> {
    pub kappa: &'a dyn Modulus,
    /// Function of `t`.
    pub phi: &'a Expr,
    pub gamma: f64,
}

pub const DEFAULT_GAMMA: f64 = 0.5;

const H_FLOOR: f64 = 1e-8;
const C1_REL_TOL: f64 = 1e-6;
const C1_STEP: f64 = 1e-7;
const INEQ_TOL: f64 = 1e-12;

/// Evaluates every clause on the sample. A violation always carries the
/// first offending sample point.
pub fn check_condition1(
    spec: &DriverSpec,
    fwd: &ForwardSpec,
    grid: &SamplingGrid,
    inputs: &ConditionInputs<'_>,
) -> Result<ConditionReport, ProblemError> {
    grid.validate()?;
    if !(inputs.gamma > 0.0 && inputs.gamma < 1.0) {
        return Err(ProblemError::Argument(format!("gamma must lie in (0, 1), got {}", inputs.gamma)));
    }
    let ts = sample_times(fwd.horizon, grid.n_t);
    let xs = grid.xs();
    let verdicts = vec![
        (Clause::PositiveH, check_h(spec, &ts)),
        (Clause::NonnegativeF, check_f(spec, &ts, &xs)),
        (Clause::LambdaModulus, check_lambda(spec, &ts, &grid.uvs(), inputs)),
        (Clause::TerminalLowerBound, check_g(spec, fwd.horizon, &xs)),
        (Clause::BoundedH, check_h_bounded(spec, &ts, grid)),
        (Clause::Dominance, check_dominance(spec, &ts, &xs, inputs.gamma)),
    ];
    Ok(ConditionReport { verdicts, resolution: grid.clone(), gamma: inputs.gamma })
}

fn violated(witness: Witness, detail: String) -> Verdict {
    Verdict::Violated { witness, detail }
}

fn check_h(spec: &DriverSpec, ts: &[f64]) -> Verdict {
    for &t in ts {
        let h = spec.big_h.at_t(t);
        if !h.is_finite() || h <= H_FLOOR {
            return violated(Witness::Time { t }, format!("H({t}) = {h} is not bounded away from zero"));
        }
    }
    for &t in ts {
        let h0 = spec.big_h.at_t(t);
        let forward = (spec.big_h.at_t(t + C1_STEP) - h0) / C1_STEP;
        let backward = (h0 - spec.big_h.at_t(t - C1_STEP)) / C1_STEP;
        let scale = forward.abs().max(backward.abs()).max(1.0);
        if !forward.is_finite() || !backward.is_finite() || (forward - backward).abs() > C1_REL_TOL * scale {
            return violated(
                Witness::Time { t },
                format!("one-sided derivatives of H disagree: {backward} vs {forward}"),
            );
        }
    }
    Verdict::Satisfied
}

fn check_f(spec: &DriverSpec, ts: &[f64], xs: &[f64]) -> Verdict {
    for &t in ts {
        for &x in xs {
            let f = spec.f.at(t, x);
            if !f.is_finite() || f < 0.0 {
                return violated(Witness::Point { t, x }, format!("f = {f}"));
            }
        }
    }
    Verdict::Satisfied
}

/// `2|u-v| |u lambda(t, M - ln u / H) - v lambda(t, M - ln v / H)| <= phi(t) kappa(|u-v|^2)`.
pub fn lambda_inequality_sides(spec: &DriverSpec, t: f64, u: f64, v: f64, inputs: &ConditionInputs<'_>) -> (f64, f64) {
    let big_h = spec.big_h.at_t(t);
    let m = spec.lower_bound;
    let lam = |w: f64| w * spec.lambda.eval(Vars::ty(t, m - w.ln() / big_h));
    let lhs = 2.0 * (u - v).abs() * (lam(u) - lam(v)).abs();
    let rhs = inputs.phi.at_t(t) * inputs.kappa.eval((u - v) * (u - v));
    (lhs, rhs)
}

fn check_lambda(spec: &DriverSpec, ts: &[f64], uvs: &[f64], inputs: &ConditionInputs<'_>) -> Verdict {
    for &t in ts {
        for &u in uvs {
            for &v in uvs {
                let (lhs, rhs) = lambda_inequality_sides(spec, t, u, v, inputs);
                if !lhs.is_finite() || !rhs.is_finite() || lhs > rhs + INEQ_TOL * rhs.abs().max(1.0) {
                    return violated(Witness::Pair { t, u, v }, format!("lhs {lhs} exceeds rhs {rhs}"));
                }
            }
        }
    }
    Verdict::Satisfied
}

fn check_g(spec: &DriverSpec, horizon: f64, xs: &[f64]) -> Verdict {
    for &x in xs {
        let g = spec.g.at(horizon, x);
        if !g.is_finite() || g < spec.lower_bound - INEQ_TOL {
            return violated(Witness::Point { t: horizon, x }, format!("g = {g} below M = {}", spec.lower_bound));
        }
    }
    Verdict::Satisfied
}

/// Boundedness is probed by growing the x window tenfold: a sup that more
/// than doubles is reported as unbounded growth.
fn check_h_bounded(spec: &DriverSpec, ts: &[f64], grid: &SamplingGrid) -> Verdict {
    let sup = |xs: &[f64]| -> Result<(f64, f64, f64), Witness> {
        let mut best = (0.0, ts[0], xs[0]);
        for &t in ts {
            for &x in xs {
                let h = spec.h.at(t, x);
                if !h.is_finite() {
                    return Err(Witness::Point { t, x });
                }
                if h.abs() > best.0 {
                    best = (h.abs(), t, x);
                }
            }
        }
        Ok(best)
    };
    let base = match sup(&grid.xs()) {
        Ok(b) => b,
        Err(w) => return violated(w, "h is not finite".into()),
    };
    let mid = 0.5 * (grid.x_lo + grid.x_hi);
    let half = 0.5 * (grid.x_hi - grid.x_lo).max(1.0);
    let wide = linspace(mid - 10.0 * half, mid + 10.0 * half, grid.n_x.max(2) * 10);
    match sup(&wide) {
        Err(w) => violated(w, "h is not finite".into()),
        Ok((wide_sup, t, x)) if wide_sup > 2.0 * base.0 + 1e-12 => violated(
            Witness::Point { t, x },
            format!("|h| grows from {} to {wide_sup} on a tenfold wider window", base.0),
        ),
        Ok(_) => Verdict::Satisfied,
    }
}

fn check_dominance(spec: &DriverSpec, ts: &[f64], xs: &[f64], gamma: f64) -> Verdict {
    for &t in ts {
        let big_h = spec.big_h.at_t(t);
        for &x in xs {
            let h = spec.h.at(t, x);
            let value = 2.0 * big_h * spec.f.at(t, x) - h * h / gamma;
            if !value.is_finite() || value < -INEQ_TOL {
                return violated(Witness::Point { t, x }, format!("2Hf - h^2/gamma = {value}"));
            }
        }
    }
    Verdict::Satisfied
}

/// Minimum of sigma over the sample when positive, `None` otherwise.
pub fn parabolicity_constant(fwd: &ForwardSpec, ts: &[f64], xs: &[f64]) -> Result<Option<f64>, ProblemError> {
    if ts.is_empty() || xs.is_empty() {
        return Err(ProblemError::Argument("sampling grid is empty".into()));
    }
    let mut min = f64::INFINITY;
    for &t in ts {
        for &x in xs {
            let s = fwd.diffusion(t, x)?;
            if s <= 0.0 {
                return Ok(None);
            }
            min = min.min(s);
        }
    }
    Ok(Some(min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kappa::Identity;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    fn spec(f: &str, h: &str, lambda: &str, big_h: &str, g: &str) -> DriverSpec {
        DriverSpec::new(p(f), p(h), p(lambda), p(big_h), p(g))
    }

    #[test]
    fn driver_direct_substitution() {
        let s = spec("1", "0", "0", "2", "0");
        assert_eq!(eval_driver(&s, 0.0, 0.0, 0.0, 3.0).unwrap(), -8.0);
        let s = spec("(x-0)^2", "0", "0", "1/1^2", "0");
        assert_eq!(eval_driver(&s, 0.0, 2.0, 0.0, 1.0).unwrap(), 3.5);
        let s = spec("x*t+1", "x", "0", "3", "0");
        assert_eq!(eval_driver(&s, 0.5, 2.0, 7.0, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn girsanov_shift() {
        let s = spec("1", "0", "0", "2", "0");
        let fwd = ForwardSpec::new(p("2"), p("1"), 0.0, 1.0).unwrap();
        assert_eq!(eval_girsanov_driver(&s, &fwd, 0.0, 0.0, 0.0, 3.0).unwrap(), -2.0);
        assert_eq!(eval_girsanov_driver(&s, &fwd, 0.0, 0.0, 0.0, 0.0).unwrap(), 1.0);
        let zero = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        assert_eq!(
            eval_girsanov_driver(&s, &zero, 0.3, 0.2, 0.0, 1.5).unwrap(),
            eval_driver(&s, 0.3, 0.2, 0.0, 1.5).unwrap()
        );
        let degenerate = ForwardSpec::new(p("1"), p("x"), 0.0, 1.0).unwrap();
        assert_eq!(
            eval_girsanov_driver(&s, &degenerate, 0.1, 0.0, 0.0, 1.0),
            Err(ProblemError::ZeroDiffusion { t: 0.1, x: 0.0 })
        );
    }

    #[test]
    fn non_finite_coefficient_is_named() {
        let s = spec("ln(x)", "0", "0", "1", "0");
        match eval_driver(&s, 0.0, -1.0, 0.0, 0.0) {
            Err(ProblemError::NonFinite { name: "f", x, .. }) => assert_eq!(x, -1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn condition_clause_i_fails_for_vanishing_h() {
        let s = spec("x^2", "0", "0", "t", "0");
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: DEFAULT_GAMMA };
        let report = check_condition1(&s, &fwd, &SamplingGrid::new(11, -2.0, 2.0, 9, 8), &inputs).unwrap();
        let v = report.verdict(Clause::PositiveH);
        assert_eq!(v.witness(), Some(Witness::Time { t: 0.0 }));
        assert!(report.verdict(Clause::LambdaModulus).holds());
        assert!(!report.uniqueness_hypothesis_holds());
    }

    #[test]
    fn kinked_h_fails_differentiability_probe() {
        let s = spec("1", "0", "0", "1+abs(t-0.5)", "0");
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: DEFAULT_GAMMA };
        let report = check_condition1(&s, &fwd, &SamplingGrid::new(11, -1.0, 1.0, 3, 2), &inputs).unwrap();
        assert_eq!(report.verdict(Clause::PositiveH).witness(), Some(Witness::Time { t: 0.5 }));
    }

    #[test]
    fn unbounded_h_and_dominance() {
        // h = x is unbounded but 2Hf - h^2/gamma = 2x^2 - 2x^2 = 0 for gamma = 1/2
        let s = spec("x^2", "x", "0", "1", "0");
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: 0.5 };
        let report = check_condition1(&s, &fwd, &SamplingGrid::new(5, -3.0, 3.0, 13, 4), &inputs).unwrap();
        assert!(!report.verdict(Clause::BoundedH).holds());
        assert!(report.verdict(Clause::Dominance).holds());
        assert!(report.uniqueness_hypothesis_holds());
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: 0.25 };
        let report = check_condition1(&s, &fwd, &SamplingGrid::new(5, -3.0, 3.0, 13, 4), &inputs).unwrap();
        assert!(!report.verdict(Clause::Dominance).holds());
        assert!(!report.uniqueness_hypothesis_holds());
    }

    #[test]
    fn empty_grid_is_an_argument_error() {
        let s = spec("1", "0", "0", "1", "0");
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: 0.5 };
        assert!(check_condition1(&s, &fwd, &SamplingGrid::new(0, 0.0, 1.0, 3, 3), &inputs).is_err());
        assert!(check_condition1(&s, &fwd, &SamplingGrid::new(3, 0.0, 1.0, 3, 0), &inputs).is_err());
    }

    #[test]
    fn parabolicity_examples() {
        let ts = linspace(0.0, 1.0, 11);
        let xs = linspace(-1.0, 1.0, 11);
        let c = |s: &str| parabolicity_constant(&ForwardSpec::new(p("0"), p(s), 0.0, 1.0).unwrap(), &ts, &xs).unwrap();
        assert_eq!(c("0.5"), Some(0.5));
        assert_eq!(c("x"), None);
        assert_eq!(c("1+t"), Some(1.0));
    }

    #[test]
    fn control_problem_driver_matches_hamiltonian() {
        let cps = ControlProblemSpec::benchmark(0.1, 1.0, 1.0);
        let d = cps.driver();
        assert_eq!(d.big_h.as_constant(), Some(0.5));
        // F = x^2 - H z^2 / 2 with z = sigma v_x equals x^2 - B^2 v_x^2 / (4 k1)
        assert_eq!(eval_driver(&d, 0.2, 2.0, 0.0, 1.0).unwrap(), 4.0 - 0.25);
        assert_eq!(cps.uncontrolled_drift().at(0.0, 2.0), -0.8);
        assert_eq!(d.terminal(3.0).unwrap(), 0.0);
        assert!(cps.validate(16).is_ok());
        let mut bad = cps.clone();
        bad.k1 = p("t-0.5");
        assert!(bad.validate(16).is_err());
    }
}
