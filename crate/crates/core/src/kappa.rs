//! Concave moduli for the Bihari-type uniqueness argument.
//!
//! [`KappaFn`] is the two-branch modulus `x (ln 1/x)^r` on `(0, eps]`,
//! continued linearly with the left slope beyond `eps`. The module also
//! carries the moduli attached to the example `lambda` families and a
//! quadrature probe for the Osgood integral `int_0+ dx / kappa(x)`.

use thiserror::Error;

use crate::expr::{Expr, Vars};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KappaError {
    #[error("invalid modulus parameters: {0}")]
    Parameters(String),
    #[error("argument {0} outside the domain")]
    Domain(f64),
    #[error("sample ({x}, {y}) outside (0,1]^2 with x != y")]
    Sample { x: f64, y: f64 },
    #[error("modulus is not positive at x = {x} (value {value})")]
    NonPositive { x: f64, value: f64 },
    #[error("quadrature did not converge on [{lower}, {upper}]")]
    Quadrature { lower: f64, upper: f64 },
}

/// A nonnegative concave modulus on `[0, inf)`.
pub trait Modulus: Send + Sync {
    fn eval(&self, x: f64) -> f64;
}

impl<F> Modulus for F
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    fn eval(&self, x: f64) -> f64 {
        self(x)
    }
}

/// `kappa(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Modulus for Identity {
    fn eval(&self, x: f64) -> f64 {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaFn {
    eps: f64,
    r: f64,
    value_at_eps: f64,
    slope_at_eps: f64,
}

impl KappaFn {
    /// Requires `0 < r <= 1` and `0 < eps < exp(-r)`.
    pub fn new(eps: f64, r: f64) -> Result<Self, KappaError> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(KappaError::Parameters(format!("r must lie in (0, 1], got {r}")));
        }
        if !(eps > 0.0 && eps < (-r).exp()) {
            return Err(KappaError::Parameters(format!("eps must lie in (0, exp(-r)) = (0, {}), got {eps}", (-r).exp())));
        }
        let l = eps.recip().ln();
        Ok(KappaFn { eps, r, value_at_eps: eps * l.powf(r), slope_at_eps: l.powf(r) * (1.0 - r / l) })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn value_at_eps(&self) -> f64 {
        self.value_at_eps
    }

    /// Slope of the linear branch, `(ln 1/eps)^r (1 - r / ln(1/eps))`.
    pub fn slope_at_eps(&self) -> f64 {
        self.slope_at_eps
    }

    fn log_branch(&self, x: f64) -> f64 {
        x * x.recip().ln().powf(self.r)
    }

    /// Total version of [`KappaFn::try_eval`]; negative input maps to NaN.
    pub fn value(&self, x: f64) -> f64 {
        if x < 0.0 || x.is_nan() {
            f64::NAN
        } else if x == 0.0 {
            0.0
        } else if x <= self.eps {
            self.log_branch(x)
        } else {
            self.value_at_eps + self.slope_at_eps * (x - self.eps)
        }
    }

    pub fn try_eval(&self, x: f64) -> Result<f64, KappaError> {
        if x < 0.0 || x.is_nan() {
            return Err(KappaError::Domain(x));
        }
        Ok(self.value(x))
    }

    pub fn derivative(&self, x: f64) -> Result<f64, KappaError> {
        if !(x > 0.0) {
            return Err(KappaError::Domain(x));
        }
        if x > self.eps {
            return Ok(self.slope_at_eps);
        }
        let l = x.recip().ln();
        Ok(l.powf(self.r) - self.r * l.powf(self.r - 1.0))
    }
}

impl Modulus for KappaFn {
    fn eval(&self, x: f64) -> f64 {
        self.value(x)
    }
}

/// `max{1, (ln eps / (2 ln(1 - eps)))^r}`.
pub fn product_constant(eps: f64, r: f64) -> f64 {
    (eps.ln() / (2.0 * (1.0 - eps).ln())).powf(r).max(1.0)
}

/// An `eps1` for which `kappa^{eps1,1}` strictly dominates `kappa^{eps,r}`
/// on `(0, 1]` when `r < 1`.
///
/// Starts from `min(eps, e^{r-2})` and shrinks until `ln(1/eps1) - 1`
/// exceeds `ln(1/eps1)^r`: then `kappa^{eps,r}(x) <= x ln(1/eps1)^r <
/// x (ln(1/eps1) - 1) < kappa^{eps1,1}(x)` for `x >= eps1`.
pub fn dominating_eps(eps: f64, r: f64) -> Result<f64, KappaError> {
    KappaFn::new(eps, r)?;
    if r >= 1.0 {
        return Err(KappaError::Parameters("dominance needs r < 1".into()));
    }
    // exp(-l) stays a normal f64 up to l = 708
    const MAX_LOG: f64 = 708.0;
    let mut l = eps.recip().ln().max(2.0 - r);
    while l - 1.0 <= l.powf(r) * (1.0 + 1e-9) {
        l += 0.5;
        if l > MAX_LOG {
            return Err(KappaError::Parameters(format!("no representable dominating eps for r = {r}")));
        }
    }
    Ok((-l).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    /// Largest observed `|x-y| |k(x)-k(y)| / k(|x-y|^2)`.
    pub max_ratio: f64,
    pub argmax: (f64, f64),
    pub bound: f64,
    /// First sample whose ratio exceeds `bound`.
    pub violation: Option<(f64, f64)>,
}

/// Empirical constant of `|x-y| |k(x)-k(y)| <= C k(|x-y|^2)` on samples.
pub fn lemma2_inequality_check(k: &KappaFn, samples: &[(f64, f64)]) -> Result<InequalityReport, KappaError> {
    let bound = product_constant(k.eps, k.r);
    let mut report = InequalityReport { max_ratio: 0.0, argmax: (f64::NAN, f64::NAN), bound, violation: None };
    for &(x, y) in samples {
        let inside = |v: f64| v > 0.0 && v <= 1.0;
        if !inside(x) || !inside(y) || x == y {
            return Err(KappaError::Sample { x, y });
        }
        let d = (x - y).abs();
        let ratio = d * (k.value(x) - k.value(y)).abs() / k.value(d * d);
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.argmax = (x, y);
        }
        if ratio > bound * (1.0 + 1e-12) && report.violation.is_none() {
            report.violation = Some((x, y));
        }
    }
    Ok(report)
}

const QUAD_REL_TOL: f64 = 1e-8;
const QUAD_MAX_DEPTH: u32 = 50;

/// `int_lower^upper dx / kappa(x)` by adaptive Simpson quadrature in
/// `s = ln x`. The caller reads divergence off the growth as `lower -> 0`.
pub fn osgood_divergence_probe(kappa: &dyn Modulus, lower: f64, upper: f64) -> Result<f64, KappaError> {
    if !(lower > 0.0 && lower < upper && upper.is_finite()) {
        return Err(KappaError::Parameters(format!("need 0 < lower < upper, got [{lower}, {upper}]")));
    }
    let integrand = |s: f64| -> Result<f64, KappaError> {
        let x = s.exp();
        let value = kappa.eval(x);
        if !(value > 0.0) {
            return Err(KappaError::NonPositive { x, value });
        }
        Ok(x / value)
    };
    let (a, b) = (lower.ln(), upper.ln());
    // Split into unit-length pieces in log space so that a long interval
    // does not get a single coarse Simpson estimate at the top level.
    let pieces = ((b - a).ceil() as usize).max(1);
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    for i in 0..pieces {
        let lo = a + h * i as f64;
        let hi = if i + 1 == pieces { b } else { lo + h };
        let (fa, fm, fb) = (integrand(lo)?, integrand(0.5 * (lo + hi))?, integrand(hi)?);
        let whole = simpson(lo, hi, fa, fm, fb);
        total += adaptive(&integrand, lo, hi, fa, fm, fb, whole, QUAD_REL_TOL, QUAD_MAX_DEPTH)
            .map_err(|e| match e {
                KappaError::Quadrature { .. } => KappaError::Quadrature { lower, upper },
                other => other,
            })?;
    }
    Ok(total)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> Result<f64, KappaError>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, KappaError> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm)?, f(rm)?);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol * (left + right).abs() || (depth == 0 && err.abs() <= 1e-6 * (left + right).abs()) {
        return Ok(left + right + err / 15.0);
    }
    if depth == 0 {
        return Err(KappaError::Quadrature { lower: a.exp(), upper: b.exp() });
    }
    Ok(adaptive(f, a, m, fa, flm, fm, left, tol, depth - 1)? + adaptive(f, m, b, fm, frm, fb, right, tol, depth - 1)?)
}

/// `C x ln(1/x) ln(ln(1/x))` on `(0, eps]`, linear beyond `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogKappa {
    c: f64,
    eps: f64,
    value_at_eps: f64,
    slope_at_eps: f64,
}

impl LogLogKappa {
    /// The log branch is increasing only where `(L-1) ln L > 1`,
    /// `L = ln(1/x)`; `eps` must lie inside that region.
    pub fn new(c: f64, eps: f64) -> Result<Self, KappaError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(KappaError::Parameters(format!("C must be positive, got {c}")));
        }
        if !(eps > 0.0 && eps < (-1.0f64).exp()) {
            return Err(KappaError::Parameters(format!("eps must lie in (0, 1/e), got {eps}")));
        }
        let l = eps.recip().ln();
        let slope = c * ((l - 1.0) * l.ln() - 1.0);
        if !(slope > 0.0) {
            return Err(KappaError::Parameters(format!("log-log modulus is not increasing at eps = {eps}")));
        }
        Ok(LogLogKappa { c, eps, value_at_eps: c * eps * l * l.ln(), slope_at_eps: slope })
    }
}

impl Modulus for LogLogKappa {
    fn eval(&self, x: f64) -> f64 {
        if x < 0.0 || x.is_nan() {
            f64::NAN
        } else if x == 0.0 {
            0.0
        } else if x <= self.eps {
            let l = x.recip().ln();
            self.c * x * l * l.ln()
        } else {
            self.value_at_eps + self.slope_at_eps * (x - self.eps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Sum,
    Max,
}

/// Example `lambda(t, u)` families and their associated moduli.
#[derive(Debug, Clone)]
pub enum ModulusFamily {
    /// `alpha(t) u^r`, modulus `kappa^{eps,r}`.
    Lambda1 { alpha: Expr, r: f64, eps: f64 },
    /// `exp(-beta(t) u)`, modulus `x`.
    Lambda2 { beta: Expr },
    /// `lambda1 + lambda2`, modulus `kappa1 + kappa2` or `max(kappa1, kappa2)`.
    Lambda3 { alpha: Expr, r: f64, eps: f64, beta: Expr, combine: Combine },
    /// `C u ln(1/u)`, modulus `C x ln(1/x) ln(ln(1/x))`.
    Lambda4 { c: f64, eps: f64 },
}

pub const DEFAULT_LOGLOG_EPS: f64 = 0.049_787_068_367_863_944; // e^-3

impl ModulusFamily {
    pub fn lambda(&self, t: f64, u: f64) -> f64 {
        let v = Vars::tx(t, 0.0);
        match self {
            ModulusFamily::Lambda1 { alpha, r, .. } => alpha.eval(v) * u.powf(*r),
            ModulusFamily::Lambda2 { beta } => (-beta.eval(v) * u).exp(),
            ModulusFamily::Lambda3 { alpha, r, beta, .. } => alpha.eval(v) * u.powf(*r) + (-beta.eval(v) * u).exp(),
            ModulusFamily::Lambda4 { c, .. } => c * u * u.recip().ln(),
        }
    }

    /// `lambda` as an expression in `(t, y)`, for use as a driver term.
    pub fn lambda_expr(&self) -> Expr {
        let lam1 = |alpha: &Expr, r: f64| alpha.clone() * Expr::Bin(crate::expr::BinOp::Pow, Box::new(Expr::y()), Box::new(Expr::Const(r)));
        let lam2 = |beta: &Expr| Expr::call(crate::expr::Func::Exp, -(beta.clone() * Expr::y()));
        match self {
            ModulusFamily::Lambda1 { alpha, r, .. } => lam1(alpha, *r),
            ModulusFamily::Lambda2 { beta } => lam2(beta),
            ModulusFamily::Lambda3 { alpha, r, beta, .. } => lam1(alpha, *r) + lam2(beta),
            ModulusFamily::Lambda4 { c, .. } => *c * Expr::y() * -Expr::call(crate::expr::Func::Ln, Expr::y()),
        }
    }

    /// Checks that `alpha`, `beta` are nonnegative and finite on `n` samples of `[0, horizon]`.
    pub fn validate_coefficients(&self, horizon: f64, n: usize) -> Result<(), KappaError> {
        let check = |name: &str, e: &Expr| -> Result<(), KappaError> {
            for i in 0..n.max(2) {
                let t = horizon * i as f64 / (n.max(2) - 1) as f64;
                let v = e.at_t(t);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(KappaError::Parameters(format!("{name}({t}) = {v} must be finite and >= 0")));
                }
            }
            Ok(())
        };
        match self {
            ModulusFamily::Lambda1 { alpha, .. } => check("alpha", alpha),
            ModulusFamily::Lambda2 { beta } => check("beta", beta),
            ModulusFamily::Lambda3 { alpha, beta, .. } => check("alpha", alpha).and(check("beta", beta)),
            ModulusFamily::Lambda4 { .. } => Ok(()),
        }
    }
}

/// The concave modulus attached to a `lambda` family.
#[derive(Debug, Clone, Copy)]
pub enum FamilyModulus {
    Kappa(KappaFn),
    Identity,
    Combined(KappaFn, Combine),
    LogLog(LogLogKappa),
}

impl Modulus for FamilyModulus {
    fn eval(&self, x: f64) -> f64 {
        match self {
            FamilyModulus::Kappa(k) => k.value(x),
            FamilyModulus::Identity => x,
            FamilyModulus::Combined(k, Combine::Sum) => k.value(x) + x,
            FamilyModulus::Combined(k, Combine::Max) => k.value(x).max(x),
            FamilyModulus::LogLog(k) => k.eval(x),
        }
    }
}

pub fn modulus_for_lambda(fam: &ModulusFamily) -> Result<FamilyModulus, KappaError> {
    match fam {
        ModulusFamily::Lambda1 { r, eps, .. } => Ok(FamilyModulus::Kappa(KappaFn::new(*eps, *r)?)),
        ModulusFamily::Lambda2 { .. } => Ok(FamilyModulus::Identity),
        ModulusFamily::Lambda3 { r, eps, combine, .. } => Ok(FamilyModulus::Combined(KappaFn::new(*eps, *r)?, *combine)),
        ModulusFamily::Lambda4 { c, eps } => Ok(FamilyModulus::LogLog(LogLogKappa::new(*c, *eps)?)),
    }
}
