//! Run configurations: a sectioned `key = value` text format, its validation,
//! and execution of the selected experiment.
//!
//! ```text
//! # comment
//! [problem]
//! kind = control
//! sigma = 1
//! ```
//!
//! Keys inside a section may be dotted (`pde.points`). Every error found is
//! reported, parse errors with line and column, semantic errors with the key
//! path.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::bsde::{BasisFamily, BsdeScheme, Route};
use crate::expr::{Expr, Var};
use crate::harness::{
    run_delta_sweep, run_feynman_kac_check, run_policy_ranking, run_uniqueness_check, BoundaryChoice, Checks,
    ExperimentResult, HarnessError, Numerics, PolicyChoice, ProblemDef,
};
use crate::kappa::{FamilyModulus, KappaFn, LogLogKappa, Modulus, DEFAULT_LOGLOG_EPS};
use crate::pde::PdeScheme;
use crate::problem::{check_condition1, ConditionInputs, ConditionReport, ControlProblemSpec, DriverSpec, ForwardSpec, SamplingGrid, DEFAULT_GAMMA};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    /// 1-based line and column in the config text.
    Text { line: usize, column: usize },
    Key(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Location::Text { line, column } => write!(f, "line {line}, column {column}: {}", self.message),
            Location::Key(k) => write!(f, "{k}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// All errors of one parse, in the order found.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    FeynmanKac,
    Uniqueness,
    DeltaSweep,
    PolicyRanking,
    Condition,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FeynmanKac => "feynman_kac",
            ExperimentKind::Uniqueness => "uniqueness",
            ExperimentKind::DeltaSweep => "delta_sweep",
            ExperimentKind::PolicyRanking => "policy_ranking",
            ExperimentKind::Condition => "condition",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModulusChoice {
    Identity,
    Kappa { eps: f64, r: f64 },
    LogLog { c: f64, eps: f64 },
}

/// Inputs of the hypothesis check.
#[derive(Debug, Clone)]
pub struct ConditionSettings {
    pub modulus: ModulusChoice,
    pub phi: Expr,
    pub gamma: f64,
    pub grid: SamplingGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub binary: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemDef,
    pub numerics: Numerics,
    pub checks: Checks,
    pub experiment: ExperimentKind,
    pub condition: ConditionSettings,
    pub output: OutputSettings,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Replaces the seed list by `seed, seed + 1, ...` of the same length.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Monte Carlo and policy-evaluation path counts.
    pub paths: Option<usize>,
    /// Monte Carlo and policy-evaluation time steps.
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        if let Some(s) = o.seed {
            let n = self.numerics.seeds.len().max(1);
            self.numerics.seeds = (0..n as u64).map(|i| s.wrapping_add(i)).collect();
        }
        if let Some(d) = &o.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(p) = o.paths {
            if p == 0 {
                errs.push(key_err("--paths", "must be at least 1"));
            }
            self.numerics.mc_paths = p;
            self.numerics.policy_paths = p;
        }
        if let Some(s) = o.steps {
            if s == 0 {
                errs.push(key_err("--steps", "must be at least 1"));
            }
            self.numerics.mc_steps = s;
            self.numerics.policy_steps = s;
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

fn key_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { location: Location::Key(key.to_string()), message: message.into() }
}

// ---------------------------------------------------------------------------
// text layer

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    /// Column where the value starts.
    column: usize,
}

const SECTIONS: [&str; 4] = ["problem", "numerics", "experiment", "output"];

fn lex(text: &str, errs: &mut Vec<ConfigError>) -> BTreeMap<String, Entry> {
    let mut map: BTreeMap<String, Entry> = BTreeMap::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();
        let col = |byte: usize| content[..byte].chars().count() + 1;
        if let Some(rest) = trimmed.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if SECTIONS.contains(&name.trim()) => section = Some(name.trim().to_string()),
                Some(name) => {
                    errs.push(ConfigError {
                        location: Location::Text { line, column: col(indent) },
                        message: format!("unknown section [{}]; expected one of {}", name.trim(), SECTIONS.join(", ")),
                    });
                    section = None;
                }
                None => errs.push(ConfigError {
                    location: Location::Text { line, column: col(indent + trimmed.len()) },
                    message: "section header is missing ']'".into(),
                }),
            }
            continue;
        }
        let Some(eq) = content.find('=') else {
            errs.push(ConfigError {
                location: Location::Text { line, column: col(indent) },
                message: "expected 'key = value'".into(),
            });
            continue;
        };
        let key = content[..eq].trim();
        let value_raw = &content[eq + 1..];
        let value = value_raw.trim();
        let vstart = eq + 1 + (value_raw.len() - value_raw.trim_start().len());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            errs.push(ConfigError {
                location: Location::Text { line, column: col(indent) },
                message: format!("invalid key '{key}'"),
            });
            continue;
        }
        if value.is_empty() {
            errs.push(ConfigError { location: Location::Text { line, column: col(vstart) }, message: format!("key '{key}' has no value") });
            continue;
        }
        let Some(sec) = &section else {
            errs.push(ConfigError {
                location: Location::Text { line, column: col(indent) },
                message: format!("key '{key}' appears outside a known section"),
            });
            continue;
        };
        let path = format!("{sec}.{key}");
        if let Some(prev) = map.get(&path) {
            errs.push(ConfigError {
                location: Location::Text { line, column: col(indent) },
                message: format!("duplicate key {path} (first set on line {})", prev.line),
            });
            continue;
        }
        map.insert(path, Entry { value: value.to_string(), line, column: col(vstart) });
    }
    map
}

/// Typed access with error collection; unread keys are reported as unknown.
struct Reader {
    map: BTreeMap<String, Entry>,
    errs: Vec<ConfigError>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.map.remove(key)
    }

    fn err_at(&mut self, e: &Entry, key: &str, message: impl fmt::Display) {
        self.errs.push(ConfigError {
            location: Location::Text { line: e.line, column: e.column },
            message: format!("{key}: {message}"),
        });
    }

    fn missing(&mut self, key: &str) {
        self.errs.push(key_err(key, "missing required key"));
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let e = self.take(key)?;
        match e.value.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.err_at(&e, key, format!("expected {what}, got '{}'", e.value));
                None
            }
        }
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        let e = self.take(key)?;
        match e.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                self.err_at(&e, key, format!("expected a finite number, got '{}'", e.value));
                None
            }
        }
    }

    fn float_in(&mut self, key: &str, ok: impl Fn(f64) -> bool, range: &str) -> Option<f64> {
        let v = self.float(key)?;
        if ok(v) {
            Some(v)
        } else {
            self.errs.push(key_err(key, format!("{v} is outside {range}")));
            None
        }
    }

    fn count(&mut self, key: &str, min: usize) -> Option<usize> {
        let v: usize = self.parse(key, "a nonnegative integer")?;
        if v < min {
            self.errs.push(key_err(key, format!("must be at least {min}, got {v}")));
            return None;
        }
        Some(v)
    }

    fn boolean(&mut self, key: &str) -> Option<bool> {
        self.parse(key, "true or false")
    }

    fn list(&mut self, key: &str) -> Option<(Entry, Vec<String>)> {
        let e = self.take(key)?;
        let items: Vec<String> = e.value.split(',').map(|s| s.trim().to_string()).collect();
        if items.iter().any(|s| s.is_empty()) {
            self.err_at(&e, key, "empty list item");
            return None;
        }
        Some((e, items))
    }

    /// An expression that may use only the variables in `allowed`.
    fn expr(&mut self, key: &str, allowed: &[Var]) -> Option<Expr> {
        let e = self.take(key)?;
        match Expr::parse(&e.value) {
            Ok(x) => {
                let bad: Vec<&str> = [(Var::T, "t"), (Var::X, "x"), (Var::Y, "y")]
                    .iter()
                    .filter(|(v, _)| x.depends_on(*v) && !allowed.contains(v))
                    .map(|(_, n)| *n)
                    .collect();
                if bad.is_empty() {
                    Some(x)
                } else {
                    self.errs.push(key_err(key, format!("may not depend on {}", bad.join(", "))));
                    None
                }
            }
            Err(pe) => {
                self.errs.push(ConfigError {
                    location: Location::Text { line: e.line, column: e.column + pe.column - 1 },
                    message: format!("{key}: expression '{}': {}", e.value, pe.message),
                });
                None
            }
        }
    }

    fn required<T>(&mut self, key: &str, v: Option<T>, present: bool) -> Option<T> {
        if !present {
            self.missing(key);
        }
        v
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn choice<T: Copy>(&mut self, key: &str, options: &[(&str, T)]) -> Option<T> {
        let e = self.take(key)?;
        match options.iter().find(|(n, _)| *n == e.value) {
            Some((_, v)) => Some(*v),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.err_at(&e, key, format!("'{}' is not one of {}", e.value, names.join(", ")));
                None
            }
        }
    }
}

// ---------------------------------------------------------------------------
// semantic layer

/// Parses and validates a configuration; returns every error found.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let map = lex(text, &mut errs);
    let mut r = Reader { map, errs };
    let problem = read_problem(&mut r);
    let (numerics, mut checks) = read_numerics(&mut r);
    let experiment = read_experiment(&mut r, &mut checks);
    let condition = read_condition(&mut r);
    let output = read_output(&mut r);
    let leftover: Vec<(String, Entry)> = std::mem::take(&mut r.map).into_iter().collect();
    let mut leftover = leftover;
    leftover.sort_by_key(|(_, e)| e.line);
    for (k, e) in leftover {
        r.errs.push(ConfigError { location: Location::Text { line: e.line, column: 1 }, message: format!("unknown key {k}") });
    }
    if let (Some(ProblemDef::Control(cps)), true) = (&problem, r.errs.is_empty()) {
        if let Err(e) = cps.validate(64) {
            r.errs.push(key_err("problem", e.to_string()));
        }
    }
    if let (Some(p), ExperimentKind::DeltaSweep | ExperimentKind::PolicyRanking) = (&problem, experiment) {
        if !matches!(p, ProblemDef::Control(_)) {
            r.errs.push(key_err("experiment.kind", format!("{} needs problem.kind = control", experiment.name())));
        }
    }
    if experiment == ExperimentKind::Uniqueness {
        if numerics.seeds.len() < 3 {
            r.errs.push(key_err("numerics.mc.seeds", "uniqueness needs at least 3 seeds"));
        }
        if numerics.bases.len() < 2 {
            r.errs.push(key_err("numerics.mc.bases", "uniqueness needs at least 2 bases"));
        }
    }
    if !r.errs.is_empty() {
        return Err(ConfigErrors(r.errs));
    }
    Ok(RunConfig {
        problem: problem.expect("validated"),
        numerics,
        checks,
        experiment,
        condition: condition.expect("validated"),
        output,
    })
}

const T_ONLY: &[Var] = &[Var::T];
const TX: &[Var] = &[Var::T, Var::X];

fn read_problem(r: &mut Reader) -> Option<ProblemDef> {
    let kind = if r.has("problem.kind") {
        r.choice("problem.kind", &[("control", true), ("driver", false)])
    } else {
        r.missing("problem.kind");
        None
    };
    let present_t = r.has("problem.T");
    let horizon = r.float_in("problem.T", |v| v > 0.0, "(0, inf)");
    let horizon = r.required("problem.T", horizon, present_t);
    let present_x0 = r.has("problem.x0");
    let x0 = r.float("problem.x0");
    let x0 = r.required("problem.x0", x0, present_x0);
    let Some(kind) = kind else {
        r.map.retain(|k, _| !k.starts_with("problem."));
        return None;
    };
    match kind {
        true => {
            let req = |r: &mut Reader, key: &str| {
                let present = r.has(key);
                let v = r.expr(key, T_ONLY);
                r.required(key, v, present)
            };
            let a = req(r, "problem.A");
            let b = req(r, "problem.B");
            let sigma = req(r, "problem.sigma");
            let k1 = req(r, "problem.k1");
            let xi = if r.has("problem.xi") { r.expr("problem.xi", T_ONLY) } else { Some(Expr::constant(0.0)) };
            let present = r.has("problem.delta");
            let delta = r.float_in("problem.delta", |v| v >= 0.0, "[0, inf)");
            let delta = r.required("problem.delta", delta, present);
            let k2 = if r.has("problem.k2") { r.float_in("problem.k2", |v| v >= 0.0, "[0, inf)") } else { Some(0.0) };
            Some(ProblemDef::Control(ControlProblemSpec {
                a: a?,
                b: b?,
                sigma: sigma?,
                delta: delta?,
                xi: xi?,
                k1: k1?,
                k2: k2?,
                x0: x0?,
                horizon: horizon?,
            }))
        }
        false => {
            let opt = |r: &mut Reader, key: &str, allowed: &[Var]| {
                if r.has(key) {
                    r.expr(key, allowed)
                } else {
                    Some(Expr::constant(0.0))
                }
            };
            let mu = opt(r, "problem.mu", TX);
            let f = opt(r, "problem.f", TX);
            let h = opt(r, "problem.h", TX);
            let lambda = opt(r, "problem.lambda", &[Var::T, Var::Y]);
            let big_h = opt(r, "problem.H", T_ONLY);
            let present = r.has("problem.sigma");
            let sigma = r.expr("problem.sigma", TX);
            let sigma = r.required("problem.sigma", sigma, present);
            let present = r.has("problem.g");
            let g = r.expr("problem.g", &[Var::X]);
            let g = r.required("problem.g", g, present);
            let m = if r.has("problem.M") { r.float("problem.M") } else { Some(0.0) };
            let exact = if r.has("problem.exact") { r.expr("problem.exact", TX).map(Some) } else { Some(None) };
            let fwd = ForwardSpec::new(mu?, sigma?, x0?, horizon?);
            let fwd = match fwd {
                Ok(f) => f,
                Err(e) => {
                    r.errs.push(key_err("problem", e.to_string()));
                    return None;
                }
            };
            let spec = DriverSpec::new(f?, h?, lambda?, big_h?, g?).with_lower_bound(m?);
            Some(ProblemDef::Driver { fwd, spec, exact: exact? })
        }
    }
}

fn parse_basis(s: &str) -> Option<BasisFamily> {
    let (name, n) = s.split_once(':')?;
    let n: usize = n.trim().parse().ok()?;
    match name.trim() {
        "polynomial" => Some(BasisFamily::Polynomial { degree: n }),
        "piecewise_linear" => Some(BasisFamily::PiecewiseLinear { n_knots: n }),
        _ => None,
    }
}

fn parse_route(s: &str) -> Option<Route> {
    match s {
        "direct" | "lsmc_direct" => Some(Route::Direct),
        "transformed" | "lsmc_transformed" => Some(Route::Transformed),
        "girsanov" | "lsmc_girsanov" => Some(Route::Girsanov),
        _ => None,
    }
}

fn read_numerics(r: &mut Reader) -> (Numerics, Checks) {
    let mut n = Numerics::default();
    let mut c = Checks::default();
    if let Some(v) = r.count("numerics.pde.points", 3) {
        n.pde_points = v;
    }
    if let Some(v) = r.count("numerics.pde.steps", 1) {
        n.pde_steps = v;
    }
    if let Some(v) = r.choice(
        "numerics.pde.scheme",
        &[("auto", PdeScheme::Auto), ("imex", PdeScheme::Imex), ("newton_implicit", PdeScheme::NewtonImplicit)],
    ) {
        n.pde_scheme = v;
    }
    if let Some(v) = r.choice(
        "numerics.pde.boundary",
        &[("linear_extrapolation", BoundaryChoice::LinearExtrapolation), ("exact", BoundaryChoice::Exact)],
    ) {
        n.pde_boundary = v;
    }
    n.pde_domain = read_interval(r, "numerics.pde.x_lo", "numerics.pde.x_hi");
    n.pde_window = read_interval(r, "numerics.pde.window_lo", "numerics.pde.window_hi");
    if let Some(v) = r.count("numerics.mc.paths", 1) {
        n.mc_paths = v;
    }
    if let Some(v) = r.count("numerics.mc.steps", 1) {
        n.mc_steps = v;
    }
    if let Some((e, items)) = r.list("numerics.mc.seeds") {
        match items.iter().map(|s| s.parse::<u64>()).collect::<Result<Vec<_>, _>>() {
            Ok(v) => n.seeds = v,
            Err(_) => r.err_at(&e, "numerics.mc.seeds", "expected nonnegative integers"),
        }
    }
    if let Some((e, items)) = r.list("numerics.mc.bases") {
        match items.iter().map(|s| parse_basis(s)).collect::<Option<Vec<_>>>() {
            Some(v) if v.iter().all(|b| match b {
                BasisFamily::Polynomial { .. } => true,
                BasisFamily::PiecewiseLinear { n_knots } => *n_knots >= 2,
            }) =>
            {
                n.bases = v
            }
            _ => r.err_at(&e, "numerics.mc.bases", "expected items like polynomial:4 or piecewise_linear:24 (at least 2 knots)"),
        }
    }
    if let Some(v) = r.choice(
        "numerics.mc.scheme",
        &[("auto", None), ("explicit", Some(BsdeScheme::Explicit)), ("implicit", Some(BsdeScheme::OneStepImplicit))],
    ) {
        n.bsde_scheme = v;
    }
    if let Some((e, items)) = r.list("numerics.mc.routes") {
        match items.iter().map(|s| parse_route(s)).collect::<Option<Vec<_>>>() {
            Some(v) => n.routes = v,
            None => r.err_at(&e, "numerics.mc.routes", "expected items among direct, transformed, girsanov"),
        }
    }
    if let Some(v) = r.count("numerics.policy.paths", 1) {
        n.policy_paths = v;
    }
    if let Some(v) = r.count("numerics.policy.steps", 1) {
        n.policy_steps = v;
    }
    if let Some(v) = r.float_in("numerics.policy.u_max", |v| v > 0.0, "(0, inf)") {
        c.u_max = v;
    }
    if let Some(v) = r.count("numerics.riccati.steps", 1) {
        n.riccati_steps = v;
    }
    let pos = |v: f64| v > 0.0;
    c.pde_tolerance = r.float_in("numerics.tol.pde_reference", pos, "(0, inf)");
    c.lsmc_tolerance = r.float_in("numerics.tol.lsmc_reference", pos, "(0, inf)");
    c.band_fraction = r.float_in("numerics.tol.band_fraction", pos, "(0, inf)");
    c.min_convergence_ratio = r.float_in("numerics.tol.convergence_ratio", pos, "(0, inf)");
    c.moment_drift = r.float_in("numerics.tol.moment_drift", pos, "(0, inf)");
    if r.has("numerics.tol.residual_pass_fraction") {
        c.residual_pass_fraction = r.float_in("numerics.tol.residual_pass_fraction", |v| (0.0..=1.0).contains(&v), "[0, 1]");
    }
    if let Some(v) = r.float_in("numerics.tol.anchor", pos, "(0, inf)") {
        c.anchor_tolerance = v;
    }
    if let Some(v) = r.float_in("numerics.tol.continuity_ratio", pos, "(0, inf)") {
        c.continuity_ratio = v;
    }
    (n, c)
}

fn read_interval(r: &mut Reader, lo_key: &str, hi_key: &str) -> Option<(f64, f64)> {
    let (has_lo, has_hi) = (r.has(lo_key), r.has(hi_key));
    let lo = r.float(lo_key);
    let hi = r.float(hi_key);
    match (has_lo, has_hi) {
        (false, false) => None,
        (true, false) => {
            r.missing(hi_key);
            None
        }
        (false, true) => {
            r.missing(lo_key);
            None
        }
        (true, true) => {
            let (lo, hi) = (lo?, hi?);
            if lo < hi {
                Some((lo, hi))
            } else {
                r.errs.push(key_err(lo_key, format!("interval [{lo}, {hi}] is empty")));
                None
            }
        }
    }
}

fn read_experiment(r: &mut Reader, c: &mut Checks) -> ExperimentKind {
    let kind = if r.has("experiment.kind") {
        r.choice(
            "experiment.kind",
            &[
                ("feynman_kac", ExperimentKind::FeynmanKac),
                ("uniqueness", ExperimentKind::Uniqueness),
                ("delta_sweep", ExperimentKind::DeltaSweep),
                ("policy_ranking", ExperimentKind::PolicyRanking),
                ("condition", ExperimentKind::Condition),
            ],
        )
    } else {
        r.missing("experiment.kind");
        None
    };
    c.reference = r.float("experiment.reference");
    c.fault_size = r.float_in("experiment.fault_size", |v| v != 0.0, "nonzero values");
    if let Some(v) = r.count("experiment.path_levels", 1) {
        c.path_levels = v;
    }
    if let Some((e, items)) = r.list("experiment.deltas") {
        match items.iter().map(|s| s.parse::<f64>()).collect::<Result<Vec<_>, _>>() {
            Ok(v) if v.iter().all(|d| d.is_finite() && *d >= 0.0) && v.contains(&0.0) => c.deltas = v,
            _ => r.err_at(&e, "experiment.deltas", "expected nonnegative numbers including 0"),
        }
    }
    if let Some(v) = r.boolean("experiment.spot_check") {
        c.spot_check = v;
    }
    if let Some((e, items)) = r.list("experiment.policies") {
        let parsed: Option<Vec<PolicyChoice>> = items
            .iter()
            .map(|s| match s.as_str() {
                "pde_feedback" => Some(PolicyChoice::PdeFeedback),
                "riccati" => Some(PolicyChoice::Riccati),
                "zero" => Some(PolicyChoice::Zero),
                other => other
                    .strip_prefix("constant:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .map(PolicyChoice::Constant),
            })
            .collect();
        match parsed {
            Some(v) if v.len() >= 2 => c.policies = v,
            _ => r.err_at(&e, "experiment.policies", "expected at least two of pde_feedback, riccati, zero, constant:<u>"),
        }
    }
    kind.unwrap_or(ExperimentKind::FeynmanKac)
}

fn read_condition(r: &mut Reader) -> Option<ConditionSettings> {
    let modulus = r.choice("experiment.condition.modulus", &[("identity", 0u8), ("kappa", 1), ("loglog", 2)]).unwrap_or(0);
    let eps = r.float_in("experiment.condition.eps", |v| v > 0.0 && v < 1.0, "(0, 1)");
    let rr = r.float_in("experiment.condition.r", |v| v > 0.0, "(0, inf)");
    let cc = r.float_in("experiment.condition.c", |v| v > 0.0, "(0, inf)");
    let modulus = match modulus {
        0 => ModulusChoice::Identity,
        1 => {
            let m = ModulusChoice::Kappa { eps: eps.unwrap_or(0.1), r: rr.unwrap_or(1.0) };
            if let ModulusChoice::Kappa { eps, r: rv } = m {
                if let Err(e) = KappaFn::new(eps, rv) {
                    r.errs.push(key_err("experiment.condition", e.to_string()));
                }
            }
            m
        }
        _ => ModulusChoice::LogLog { c: cc.unwrap_or(1.0), eps: eps.unwrap_or(DEFAULT_LOGLOG_EPS) },
    };
    let phi = if r.has("experiment.condition.phi") { r.expr("experiment.condition.phi", T_ONLY) } else { Some(Expr::constant(1.0)) };
    let gamma = if r.has("experiment.condition.gamma") {
        r.float_in("experiment.condition.gamma", |v| v > 0.0 && v < 1.0, "(0, 1)")
    } else {
        Some(DEFAULT_GAMMA)
    };
    let n_t = r.count("experiment.condition.n_t", 1).unwrap_or(21);
    let n_x = r.count("experiment.condition.n_x", 1).unwrap_or(41);
    let n_uv = r.count("experiment.condition.n_uv", 1).unwrap_or(20);
    let x_lo = r.float("experiment.condition.x_lo").unwrap_or(-4.0);
    let x_hi = r.float("experiment.condition.x_hi").unwrap_or(4.0);
    if x_lo > x_hi {
        r.errs.push(key_err("experiment.condition.x_lo", format!("range [{x_lo}, {x_hi}] is empty")));
    }
    Some(ConditionSettings { modulus, phi: phi?, gamma: gamma?, grid: SamplingGrid::new(n_t, x_lo, x_hi, n_x, n_uv) })
}

fn read_output(r: &mut Reader) -> OutputSettings {
    let dir = r.take("output.dir").map(|e| PathBuf::from(e.value)).unwrap_or_else(|| PathBuf::from("out"));
    let mut binary = false;
    if let Some((e, items)) = r.list("output.formats") {
        for it in &items {
            match it.as_str() {
                "csv" => {}
                "binary" => binary = true,
                _ => {
                    r.err_at(&e, "output.formats", format!("unknown format '{it}'; expected csv or binary"));
                    break;
                }
            }
        }
    }
    OutputSettings { dir, binary }
}

// ---------------------------------------------------------------------------
// execution

/// What a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

pub fn modulus(choice: &ModulusChoice) -> Result<Box<dyn Modulus>, String> {
    match *choice {
        ModulusChoice::Identity => Ok(Box::new(FamilyModulus::Identity)),
        ModulusChoice::Kappa { eps, r } => KappaFn::new(eps, r).map(|k| Box::new(k) as Box<dyn Modulus>).map_err(|e| e.to_string()),
        ModulusChoice::LogLog { c, eps } => {
            LogLogKappa::new(c, eps).map(|k| Box::new(k) as Box<dyn Modulus>).map_err(|e| e.to_string())
        }
    }
}

/// Runs the hypothesis checker on the configured problem.
pub fn check_condition(cfg: &RunConfig) -> Result<ConditionReport, String> {
    let m = modulus(&cfg.condition.modulus)?;
    let inputs = ConditionInputs { kappa: m.as_ref(), phi: &cfg.condition.phi, gamma: cfg.condition.gamma };
    let fwd = cfg.problem.forward();
    let spec = cfg.problem.driver();
    check_condition1(&spec, &fwd, &cfg.condition.grid, &inputs).map_err(|e| e.to_string())
}

/// Executes an experiment and writes its artifacts.
pub fn execute(cfg: &RunConfig, kind: ExperimentKind) -> Result<RunOutcome, HarnessError> {
    if kind == ExperimentKind::Condition {
        let report = check_condition(cfg).map_err(HarnessError::Config)?;
        let summary = report.summary();
        let files = write_files(&cfg.output.dir, &[("condition.txt".into(), summary.clone().into_bytes())])
            .map_err(|e| HarnessError::Config(format!("cannot write to {}: {e}", cfg.output.dir.display())))?;
        let code = if report.uniqueness_hypothesis_holds() { EXIT_PASS } else { EXIT_FAIL };
        return Ok(RunOutcome { exit_code: code, summary, files });
    }
    let result = run_experiment(cfg, kind)?;
    let files = write_result(&result, &cfg.output)
        .map_err(|e| HarnessError::Config(format!("cannot write to {}: {e}", cfg.output.dir.display())))?;
    Ok(RunOutcome {
        exit_code: if result.passed() { EXIT_PASS } else { EXIT_FAIL },
        summary: result.summary(),
        files,
    })
}

pub fn run_experiment(cfg: &RunConfig, kind: ExperimentKind) -> Result<ExperimentResult, HarnessError> {
    let control = || match &cfg.problem {
        ProblemDef::Control(cps) => Ok(cps),
        _ => Err(HarnessError::Config(format!("{} needs a control problem", kind.name()))),
    };
    match kind {
        ExperimentKind::FeynmanKac => run_feynman_kac_check(&cfg.problem, &cfg.numerics, &cfg.checks),
        ExperimentKind::Uniqueness => run_uniqueness_check(&cfg.problem, &cfg.numerics, &cfg.checks),
        ExperimentKind::DeltaSweep => run_delta_sweep(control()?, &cfg.numerics, &cfg.checks),
        ExperimentKind::PolicyRanking => run_policy_ranking(control()?, &cfg.numerics, &cfg.checks),
        ExperimentKind::Condition => Err(HarnessError::Config("the condition check has no experiment result".into())),
    }
}

/// `values.csv`, `checks.csv`, `summary.txt`, the experiment's own tables,
/// and `pde_solution.bin` when binary output is on.
pub fn write_result(result: &ExperimentResult, out: &OutputSettings) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("values.csv".into(), result.values_csv()),
        ("checks.csv".into(), result.checks_csv()),
        ("summary.txt".into(), result.summary().into_bytes()),
    ];
    for a in &result.artifacts {
        files.push((a.name.clone(), a.bytes.clone()));
    }
    if let (true, Some(pde)) = (out.binary, &result.pde) {
        let mut b = Vec::new();
        pde.write_binary(&mut b)?;
        files.push(("pde_solution.bin".into(), b));
    }
    write_files(&out.dir, &files)
}

fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    files
        .iter()
        .map(|(name, bytes)| {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}
