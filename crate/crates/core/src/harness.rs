//! Experiments that pit the solution routes against each other and against
//! closed-form references, producing a table of values and a list of
//! PASS/FAIL checks.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::bsde::{
    martingale_residual, solve_girsanov, solve_lsmc, solve_transformed, BackwardSolution, BasisFamily, BasisSpec,
    BsdeScheme, DriverRef, Route,
};
use crate::control::{compare_policies_with, default_scheme, solve_riccati, ControlPolicy, RiccatiSolution};
use crate::expr::Expr;
use crate::pde::{
    extract_feedback, refinement_study, solve_pde, BoundaryPolicy, GridSolution, PdeScheme, Profile, SpaceGrid,
};
use crate::problem::{ControlProblemSpec, DriverSpec, ForwardSpec};
use crate::sde::{simulate, simulate_with_increments, PathEnsemble, Scheme, TimeGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{route}: {message}")]
    Route { route: String, message: String },
}

fn route_err(route: &str) -> impl Fn(String) -> HarnessError + '_ {
    move |message| HarnessError::Route { route: route.to_string(), message }
}

/// The problem under study.
#[derive(Debug, Clone)]
pub enum ProblemDef {
    Driver {
        fwd: ForwardSpec,
        spec: DriverSpec,
        /// Closed-form `v(t, x)` when known.
        exact: Option<Expr>,
    },
    Control(ControlProblemSpec),
}

impl ProblemDef {
    pub fn forward(&self) -> ForwardSpec {
        match self {
            ProblemDef::Driver { fwd, .. } => fwd.clone(),
            ProblemDef::Control(cps) => cps.forward(),
        }
    }

    pub fn driver(&self) -> DriverSpec {
        match self {
            ProblemDef::Driver { spec, .. } => spec.clone(),
            ProblemDef::Control(cps) => cps.driver(),
        }
    }

    fn sde_scheme(&self) -> Scheme {
        match self {
            ProblemDef::Driver { .. } => Scheme::Euler,
            ProblemDef::Control(cps) => default_scheme(cps),
        }
    }

    /// Riccati solution when the control problem is linear.
    fn riccati(&self, n_steps: usize) -> Result<Option<Arc<RiccatiSolution>>, HarnessError> {
        match self {
            ProblemDef::Control(cps) if cps.delta == 0.0 => {
                let grid = TimeGrid::new(0.0, cps.horizon, n_steps).map_err(|e| route_err("riccati")(e.to_string()))?;
                let sol = solve_riccati(cps, &grid).map_err(|e| route_err("riccati")(e.to_string()))?;
                Ok(Some(Arc::new(sol)))
            }
            _ => Ok(None),
        }
    }

    fn exact_profile(&self, riccati: Option<&Arc<RiccatiSolution>>) -> Option<Profile> {
        match self {
            ProblemDef::Driver { exact: Some(e), .. } => {
                let e = e.clone();
                Some(Arc::new(move |t, x| e.at(t, x)))
            }
            ProblemDef::Control(_) => riccati.map(|r| Arc::new(r.profile()) as Profile),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryChoice {
    LinearExtrapolation,
    /// Dirichlet data from the closed form or the Riccati solution.
    Exact,
}

/// Grids, sample sizes and schemes.
#[derive(Debug, Clone)]
pub struct Numerics {
    pub pde_points: usize,
    pub pde_steps: usize,
    pub pde_scheme: PdeScheme,
    pub pde_domain: Option<(f64, f64)>,
    pub pde_boundary: BoundaryChoice,
    /// Window for the sup-norm in the refinement study.
    pub pde_window: Option<(f64, f64)>,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub seeds: Vec<u64>,
    pub bases: Vec<BasisFamily>,
    pub bsde_scheme: Option<BsdeScheme>,
    pub routes: Vec<Route>,
    pub policy_paths: usize,
    pub policy_steps: usize,
    pub riccati_steps: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            pde_points: 401,
            pde_steps: 1000,
            pde_scheme: PdeScheme::Auto,
            pde_domain: None,
            pde_boundary: BoundaryChoice::LinearExtrapolation,
            pde_window: None,
            mc_paths: 100_000,
            mc_steps: 128,
            seeds: vec![1],
            bases: vec![BasisFamily::Polynomial { degree: 4 }],
            bsde_scheme: None,
            routes: vec![Route::Direct, Route::Transformed, Route::Girsanov],
            policy_paths: 100_000,
            policy_steps: 200,
            riccati_steps: 4000,
        }
    }
}

/// A policy entry of the ranking experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    /// `-B v_x / (2 k1)` from the finite-difference solution.
    PdeFeedback,
    /// Closed-form linear feedback (linear problem only).
    Riccati,
    Zero,
    Constant(f64),
}

impl PolicyChoice {
    pub fn name(&self) -> String {
        match self {
            PolicyChoice::PdeFeedback => "pde_feedback".into(),
            PolicyChoice::Riccati => "riccati".into(),
            PolicyChoice::Zero => "zero".into(),
            PolicyChoice::Constant(c) => format!("constant:{c}"),
        }
    }
}

/// Which checks to emit and their thresholds. `None` disables a check.
#[derive(Debug, Clone)]
pub struct Checks {
    /// Known `v(0, x0)`; overrides the closed form and the Riccati value.
    pub reference: Option<f64>,
    /// Absolute tolerance of the PDE value against the reference.
    pub pde_tolerance: Option<f64>,
    /// Absolute tolerance of LSMC values against the reference; the default
    /// is three standard errors.
    pub lsmc_tolerance: Option<f64>,
    /// Upper bound on `3 * combined stderr / value` (agreement runs) or on the
    /// band width relative to the value (uniqueness runs).
    pub band_fraction: Option<f64>,
    pub min_convergence_ratio: Option<f64>,
    pub moment_drift: Option<f64>,
    pub residual_pass_fraction: Option<f64>,
    /// Size of the shift injected into one interior node.
    pub fault_size: Option<f64>,
    /// Number of path-count levels in the uniqueness run (`N, 2N, ...`).
    pub path_levels: usize,
    pub deltas: Vec<f64>,
    pub anchor_tolerance: f64,
    /// Upper bound on the half-gap ratio in the continuity check.
    pub continuity_ratio: f64,
    pub spot_check: bool,
    pub policies: Vec<PolicyChoice>,
    pub u_max: f64,
}

impl Default for Checks {
    fn default() -> Self {
        Checks {
            reference: None,
            pde_tolerance: None,
            lsmc_tolerance: None,
            band_fraction: None,
            min_convergence_ratio: None,
            moment_drift: None,
            residual_pass_fraction: Some(0.95),
            fault_size: None,
            path_levels: 2,
            deltas: vec![0.0, 0.05, 0.1],
            anchor_tolerance: 5e-3,
            continuity_ratio: 0.75,
            spot_check: false,
            policies: vec![
                PolicyChoice::PdeFeedback,
                PolicyChoice::Zero,
                PolicyChoice::Constant(0.5),
                PolicyChoice::Constant(-0.5),
            ],
            u_max: crate::control::DEFAULT_U_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteValue {
    pub route: String,
    pub seed: Option<u64>,
    pub basis: Option<String>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub value: f64,
    /// Standard error for Monte Carlo routes, grid-error estimate for the PDE.
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    AtLeast,
}

/// One named criterion with the numbers that decided it.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub criterion: String,
    pub observed: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn at_most(criterion: impl Into<String>, observed: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            criterion: criterion.into(),
            observed,
            tolerance,
            relation: Relation::AtMost,
            pass: observed <= tolerance,
            detail: detail.into(),
        }
    }

    fn at_least(criterion: impl Into<String>, observed: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            criterion: criterion.into(),
            observed,
            tolerance,
            relation: Relation::AtLeast,
            pass: observed >= tolerance,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let rel = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        };
        let mut s = format!(
            "{} {} observed={:.6e} tolerance{}{:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.observed,
            rel,
            self.tolerance
        );
        if !self.detail.is_empty() {
            s.push_str("  ");
            s.push_str(&self.detail);
        }
        s
    }
}

/// A named output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub id: String,
    pub values: Vec<RouteValue>,
    pub checks: Vec<Check>,
    pub seeds: Vec<u64>,
    pub resolutions: Vec<(String, String)>,
    pub notes: Vec<String>,
    pub artifacts: Vec<Artifact>,
    /// Finite-difference solution at the configured resolution, if any.
    pub pde: Option<Arc<GridSolution>>,
}

impl ExperimentResult {
    fn new(id: &str) -> Self {
        ExperimentResult {
            id: id.to_string(),
            values: Vec::new(),
            checks: Vec::new(),
            seeds: Vec::new(),
            resolutions: Vec::new(),
            notes: Vec::new(),
            artifacts: Vec::new(),
            pde: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, criterion: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.criterion == criterion)
    }

    pub fn value(&self, route: &str) -> Option<&RouteValue> {
        self.values.iter().find(|v| v.route == route)
    }

    /// Verdict lines followed by seeds, resolutions and notes.
    pub fn summary(&self) -> String {
        let mut out = format!("experiment {}\n", self.id);
        for c in &self.checks {
            out.push_str(&c.line());
            out.push('\n');
        }
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "seeds: {}", seeds.join(","));
        for (k, v) in &self.resolutions {
            let _ = writeln!(out, "{k}: {v}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }

    pub fn values_csv(&self) -> Vec<u8> {
        let mut s = String::from("route,seed,basis,n_paths,n_steps,value,error\n");
        for v in &self.values {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                v.route,
                v.seed.map(|x| x.to_string()).unwrap_or_default(),
                v.basis.as_deref().unwrap_or(""),
                v.n_paths,
                v.n_steps,
                v.value,
                v.error
            );
        }
        s.into_bytes()
    }

    pub fn checks_csv(&self) -> Vec<u8> {
        let mut s = String::from("criterion,pass,observed,tolerance\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{},{}", c.criterion, c.pass, c.observed, c.tolerance);
        }
        s.into_bytes()
    }

    fn push_csv(&mut self, name: String, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut bytes = Vec::new();
        write(&mut bytes).expect("writing to memory");
        self.artifacts.push(Artifact { name, bytes });
    }
}

// ---------------------------------------------------------------------------
// shared pieces

struct PdeOutcome {
    sol: GridSolution,
    value: f64,
    error: f64,
    ratio: Option<f64>,
    levels: String,
}

fn pde_route(
    problem: &ProblemDef,
    numerics: &Numerics,
    riccati: Option<&Arc<RiccatiSolution>>,
    study: bool,
) -> Result<PdeOutcome, HarnessError> {
    let err = route_err("pde");
    let fwd = problem.forward();
    let spec = problem.driver();
    let sgrid = match numerics.pde_domain {
        Some((lo, hi)) => SpaceGrid::new(lo, hi, numerics.pde_points),
        None => SpaceGrid::default_for(&fwd, numerics.pde_points),
    }
    .map_err(|e| err(e.to_string()))?;
    let tgrid = TimeGrid::new(0.0, fwd.horizon, numerics.pde_steps).map_err(|e| err(e.to_string()))?;
    let boundary = match numerics.pde_boundary {
        BoundaryChoice::LinearExtrapolation => BoundaryPolicy::LinearExtrapolation,
        BoundaryChoice::Exact => BoundaryPolicy::DirichletFromProfile(
            problem
                .exact_profile(riccati)
                .ok_or_else(|| err("exact boundary data requested but no closed form is available".into()))?,
        ),
    };
    let sol = solve_pde(&fwd, &spec, &sgrid, &tgrid, numerics.pde_scheme, &boundary).map_err(|e| err(e.to_string()))?;
    if study {
        let window = numerics.pde_window.unwrap_or_else(|| default_window(&fwd));
        let st = refinement_study(&fwd, &spec, &sgrid, &tgrid, numerics.pde_scheme, &boundary, Some(window))
            .map_err(|e| err(e.to_string()))?;
        let levels = format!(
            "{}x{}, {}x{}, {}x{}",
            sgrid.n_points,
            tgrid.n_steps,
            sgrid.refined().n_points,
            tgrid.n_steps * 2,
            sgrid.refined().refined().n_points,
            tgrid.n_steps * 4
        );
        Ok(PdeOutcome { sol, value: st.values[2], error: st.error_estimate, ratio: Some(st.ratio), levels })
    } else {
        // one refinement; first-order error of the finer value
        let fine = solve_pde(&fwd, &spec, &sgrid.refined(), &tgrid.refined(), numerics.pde_scheme, &boundary)
            .map_err(|e| err(e.to_string()))?;
        let coarse = sol.initial_value(fwd.x0);
        let value = fine.initial_value(fwd.x0);
        let levels = format!("{}x{}, {}x{}", sgrid.n_points, tgrid.n_steps, sgrid.refined().n_points, tgrid.n_steps * 2);
        Ok(PdeOutcome { sol, value, error: (coarse - value).abs(), ratio: None, levels })
    }
}

fn default_window(fwd: &ForwardSpec) -> (f64, f64) {
    let s = fwd.diffusion(0.0, fwd.x0).unwrap_or(1.0).abs().max(1e-3);
    let half = 4.0 * s * fwd.horizon.sqrt();
    (fwd.x0 - half, fwd.x0 + half)
}

/// Why a route cannot be run on this problem, if it cannot.
pub fn route_inapplicable(route: Route, fwd: &ForwardSpec, spec: &DriverSpec) -> Option<String> {
    let samples = 16;
    match route {
        Route::Direct => None,
        Route::Transformed => {
            if !spec.lower_bound.is_finite() {
                return Some("no finite lower bound".into());
            }
            (0..=samples)
                .map(|j| fwd.horizon * j as f64 / samples as f64)
                .find(|&t| !spec.h_of_t(t).is_ok_and(|h| h > 0.0))
                .map(|t| format!("H is not positive at t={t}"))
        }
        Route::Girsanov => {
            let s = fwd.diffusion(0.0, fwd.x0).unwrap_or(0.0);
            (s.abs() < 1e-8).then(|| "zero diffusion".into())
        }
    }
}

struct Ensembles {
    ens: PathEnsemble,
    driftless: Option<PathEnsemble>,
}

fn ensembles(problem: &ProblemDef, grid: &TimeGrid, n_paths: usize, seed: u64, girsanov: bool) -> Result<Ensembles, HarnessError> {
    let fwd = problem.forward();
    let ens = simulate(&fwd, grid, n_paths, seed, problem.sde_scheme()).map_err(|e| route_err("sde")(e.to_string()))?;
    let driftless = if girsanov {
        Some(simulate(&fwd.driftless(), grid, n_paths, seed, Scheme::Euler).map_err(|e| route_err("sde")(e.to_string()))?)
    } else {
        None
    };
    Ok(Ensembles { ens, driftless })
}

fn run_route(
    route: Route,
    problem: &ProblemDef,
    ensembles: &Ensembles,
    family: BasisFamily,
    scheme: Option<BsdeScheme>,
) -> Result<BackwardSolution, HarnessError> {
    let err = route_err(route.name());
    let fwd = problem.forward();
    let spec = problem.driver();
    let scheme = scheme.unwrap_or_else(|| BsdeScheme::default_for(&spec));
    let ens = match route {
        Route::Girsanov => ensembles.driftless.as_ref().expect("driftless ensemble"),
        _ => &ensembles.ens,
    };
    let basis = BasisSpec::covering(family, ens).map_err(|e| err(e.to_string()))?;
    match route {
        Route::Direct => solve_lsmc(ens, &spec, &basis, scheme),
        Route::Transformed => solve_transformed(ens, &spec, &basis, scheme),
        Route::Girsanov => solve_girsanov(ens, &spec, &fwd, &basis, scheme),
    }
    .map_err(|e| err(e.to_string()))
}

fn residual_for(
    route: Route,
    sol: &BackwardSolution,
    problem: &ProblemDef,
    ensembles: &Ensembles,
) -> Result<crate::bsde::ResidualReport, HarnessError> {
    let fwd = problem.forward();
    let spec = problem.driver();
    let (driver, ens) = match route {
        Route::Girsanov => (DriverRef::Girsanov(&spec, &fwd), ensembles.driftless.as_ref().expect("driftless ensemble")),
        _ => (DriverRef::Direct(&spec), &ensembles.ens),
    };
    martingale_residual(sol, driver, ens).map_err(|e| route_err(route.name())(e.to_string()))
}

fn active_routes(problem: &ProblemDef, routes: &[Route], notes: &mut Vec<String>) -> Vec<Route> {
    let fwd = problem.forward();
    let spec = problem.driver();
    routes
        .iter()
        .copied()
        .filter(|&r| match route_inapplicable(r, &fwd, &spec) {
            Some(why) => {
                notes.push(format!("{} skipped: {why}", r.name()));
                false
            }
            None => true,
        })
        .collect()
}

fn reference_value(
    problem: &ProblemDef,
    checks: &Checks,
    riccati: Option<&Arc<RiccatiSolution>>,
) -> Option<(f64, &'static str)> {
    if let Some(r) = checks.reference {
        return Some((r, "reference"));
    }
    match problem {
        ProblemDef::Driver { fwd, exact: Some(e), .. } => Some((e.at(0.0, fwd.x0), "closed_form")),
        ProblemDef::Control(_) => riccati.map(|r| (r.initial_value(), "riccati")),
        _ => None,
    }
}

fn residual_rows<'a>(report: &'a crate::bsde::ResidualReport, grid: &'a TimeGrid) -> impl FnOnce(&mut Vec<u8>) -> std::io::Result<()> + 'a {
    move |w| {
        use std::io::Write;
        writeln!(w, "k,t,mean,stderr,flagged")?;
        for (k, s) in report.steps.iter().enumerate() {
            writeln!(w, "{k},{},{},{},{}", grid.time(k), s.mean, s.stderr, s.flagged)?;
        }
        Ok(())
    }
}

fn pde_initial_rows(sol: &GridSolution) -> impl FnOnce(&mut Vec<u8>) -> std::io::Result<()> + '_ {
    move |w| {
        use std::io::Write;
        writeln!(w, "x,v,v_x")?;
        for i in 0..sol.sgrid.n_points {
            writeln!(w, "{},{},{}", sol.sgrid.x(i), sol.v[[0, i]], sol.v_x[[0, i]])?;
        }
        Ok(())
    }
}

fn check_problem(problem: &ProblemDef) -> Result<(), HarnessError> {
    if let ProblemDef::Control(cps) = problem {
        cps.validate(64).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// experiments

/// Solves by finite differences and by every applicable Monte Carlo route,
/// then checks pairwise agreement and the reference value when one exists.
pub fn run_feynman_kac_check(problem: &ProblemDef, numerics: &Numerics, checks: &Checks) -> Result<ExperimentResult, HarnessError> {
    check_problem(problem)?;
    let mut res = ExperimentResult::new("feynman_kac");
    let seed = *numerics.seeds.first().ok_or_else(|| HarnessError::Config("no seed given".into()))?;
    let family = *numerics.bases.first().ok_or_else(|| HarnessError::Config("no basis given".into()))?;
    res.seeds.push(seed);
    let riccati = problem.riccati(numerics.riccati_steps)?;
    let reference = reference_value(problem, checks, riccati.as_ref());
    if let Some((v, name)) = reference {
        res.values.push(RouteValue { route: name.into(), seed: None, basis: None, n_paths: 0, n_steps: 0, value: v, error: 0.0 });
    }

    let pde = pde_route(problem, numerics, riccati.as_ref(), checks.min_convergence_ratio.is_some())?;
    res.values.push(RouteValue {
        route: "pde".into(),
        seed: None,
        basis: None,
        n_paths: 0,
        n_steps: numerics.pde_steps,
        value: pde.value,
        error: pde.error,
    });
    res.resolutions.push(("pde".into(), format!("{} ({}, {})", pde.levels, pde.sol.scheme.name(), pde.sol.boundary)));
    if let (Some(min), Some(ratio)) = (checks.min_convergence_ratio, pde.ratio) {
        res.checks.push(Check::at_least("pde_self_convergence", ratio, min, "sup-norm difference ratio over two refinements"));
    }
    if let (Some(tol), Some((v, name))) = (checks.pde_tolerance, reference) {
        res.checks.push(Check::at_most("pde_vs_reference", (pde.value - v).abs(), tol, format!("pde={} {name}={v}", pde.value)));
    }

    let grid = TimeGrid::new(0.0, problem.forward().horizon, numerics.mc_steps).map_err(|e| HarnessError::Config(e.to_string()))?;
    let routes = active_routes(problem, &numerics.routes, &mut res.notes);
    let ens = ensembles(problem, &grid, numerics.mc_paths, seed, routes.contains(&Route::Girsanov))?;
    res.resolutions.push((
        "lsmc".into(),
        format!("{} paths x {} steps, basis {family}", numerics.mc_paths, numerics.mc_steps),
    ));

    for &route in &routes {
        let sol = run_route(route, problem, &ens, family, numerics.bsde_scheme)?;
        let name = route.name();
        res.values.push(RouteValue {
            route: name.into(),
            seed: Some(seed),
            basis: Some(family.to_string()),
            n_paths: numerics.mc_paths,
            n_steps: numerics.mc_steps,
            value: sol.y0,
            error: sol.y0_stderr,
        });
        for w in &sol.warnings {
            res.notes.push(format!("{name}: {w}"));
        }
        let combined = sol.y0_stderr + pde.error;
        res.checks.push(Check::at_most(
            format!("{name}_vs_pde"),
            (sol.y0 - pde.value).abs(),
            3.0 * combined,
            format!("{name}={} pde={}", sol.y0, pde.value),
        ));
        if let Some((v, rname)) = reference {
            let tol = checks.lsmc_tolerance.unwrap_or(3.0 * sol.y0_stderr);
            res.checks.push(Check::at_most(format!("{name}_vs_reference"), (sol.y0 - v).abs(), tol, format!("{rname}={v}")));
        }
        if let Some(frac) = checks.band_fraction {
            let scale = reference.map(|r| r.0).unwrap_or(pde.value).abs();
            res.checks.push(Check::at_most(format!("{name}_band_fraction"), 3.0 * combined / scale, frac, ""));
        }
        let report = residual_for(route, &sol, problem, &ens)?;
        if let Some(frac) = checks.residual_pass_fraction {
            res.checks.push(Check::at_least(
                format!("{name}_residual"),
                report.pass_fraction,
                frac,
                format!("flagged steps {:?}", report.flagged_steps()),
            ));
        }
        if route == Route::Direct {
            if let Some(size) = checks.fault_size {
                res.checks.push(fault_check(&sol, size, problem, &ens)?);
            }
        }
        res.push_csv(format!("bsde_{name}.csv"), |w| sol.write_csv(w));
        res.push_csv(format!("residual_{name}.csv"), residual_rows(&report, &grid));
    }

    if let Some(tol) = checks.moment_drift {
        res.checks.push(moment_check(problem, numerics, seed, tol)?);
    }
    res.push_csv("pde_initial.csv".into(), pde_initial_rows(&pde.sol));
    res.pde = Some(Arc::new(pde.sol));
    Ok(res)
}

fn fault_check(sol: &BackwardSolution, size: f64, problem: &ProblemDef, ens: &Ensembles) -> Result<Check, HarnessError> {
    let j = sol.grid.n_steps / 2;
    let mut bad = sol.clone();
    bad.y.row_mut(j).mapv_inplace(|v| v + size);
    let report = residual_for(Route::Direct, &bad, problem, ens)?;
    let hit = report.suspect_nodes == vec![j];
    Ok(Check {
        criterion: "fault_localization".into(),
        observed: if hit { 1.0 } else { 0.0 },
        tolerance: 1.0,
        relation: Relation::AtLeast,
        pass: hit,
        detail: format!("shift {size} at node {j}, suspects {:?}", report.suspect_nodes),
    })
}

/// Relative change of `E[X_T^2]` when the step is halved on the same noise.
fn moment_check(problem: &ProblemDef, numerics: &Numerics, seed: u64, tol: f64) -> Result<Check, HarnessError> {
    let err = route_err("sde");
    let fwd = problem.forward();
    let coarse_grid = TimeGrid::new(0.0, fwd.horizon, numerics.mc_steps).map_err(|e| err(e.to_string()))?;
    let fine_grid = coarse_grid.refined();
    let fine = simulate(&fwd, &fine_grid, numerics.mc_paths, seed, problem.sde_scheme()).map_err(|e| err(e.to_string()))?;
    let dw = fine.coarsened_increments().map_err(|e| err(e.to_string()))?;
    let coarse = simulate_with_increments(&fwd, &coarse_grid, dw, seed, problem.sde_scheme()).map_err(|e| err(e.to_string()))?;
    let (mc, mf) = (coarse.terminal_moment(2), fine.terminal_moment(2));
    Ok(Check::at_most(
        "moment_stability",
        (mc - mf).abs() / mf.abs(),
        tol,
        format!("E[X_T^2] {mc} at {} steps, {mf} at {} steps", coarse_grid.n_steps, fine_grid.n_steps),
    ))
}

/// Half-width-weighted band test: every interval `[y_i - 3 s_i, y_i + 3 s_i]`
/// shares a common point. Returns `max lower - min upper` (<= 0 passes).
fn band_gap(values: &[(f64, f64)]) -> f64 {
    let lower = values.iter().map(|&(y, s)| y - 3.0 * s).fold(f64::NEG_INFINITY, f64::max);
    let upper = values.iter().map(|&(y, s)| y + 3.0 * s).fold(f64::INFINITY, f64::min);
    lower - upper
}

/// Repeats the Monte Carlo routes over seeds, bases and path counts; all
/// initial values must be compatible with a single solution.
pub fn run_uniqueness_check(problem: &ProblemDef, numerics: &Numerics, checks: &Checks) -> Result<ExperimentResult, HarnessError> {
    check_problem(problem)?;
    if numerics.seeds.len() < 3 {
        return Err(HarnessError::Config(format!("uniqueness check needs at least 3 seeds, got {}", numerics.seeds.len())));
    }
    if numerics.bases.len() < 2 {
        return Err(HarnessError::Config(format!("uniqueness check needs at least 2 bases, got {}", numerics.bases.len())));
    }
    if checks.path_levels == 0 {
        return Err(HarnessError::Config("path_levels must be at least 1".into()));
    }
    let mut res = ExperimentResult::new("uniqueness");
    res.seeds = numerics.seeds.clone();
    let riccati = problem.riccati(numerics.riccati_steps)?;
    let reference = reference_value(problem, checks, riccati.as_ref());
    if let Some((v, name)) = reference {
        res.values.push(RouteValue { route: name.into(), seed: None, basis: None, n_paths: 0, n_steps: 0, value: v, error: 0.0 });
    }
    let routes = active_routes(problem, &numerics.routes, &mut res.notes);
    let grid = TimeGrid::new(0.0, problem.forward().horizon, numerics.mc_steps).map_err(|e| HarnessError::Config(e.to_string()))?;
    let bases: Vec<String> = numerics.bases.iter().map(|b| b.to_string()).collect();
    res.resolutions.push(("lsmc".into(), format!("{} steps, bases {}", numerics.mc_steps, bases.join(" "))));

    let mut failed_levels = 0;
    for level in 0..checks.path_levels {
        let n_paths = numerics.mc_paths << level;
        let mut estimates = Vec::new();
        for &seed in &numerics.seeds {
            let ens = ensembles(problem, &grid, n_paths, seed, routes.contains(&Route::Girsanov))?;
            for &family in &numerics.bases {
                for &route in &routes {
                    let sol = run_route(route, problem, &ens, family, numerics.bsde_scheme)?;
                    estimates.push((sol.y0, sol.y0_stderr));
                    res.values.push(RouteValue {
                        route: route.name().into(),
                        seed: Some(seed),
                        basis: Some(family.to_string()),
                        n_paths,
                        n_steps: numerics.mc_steps,
                        value: sol.y0,
                        error: sol.y0_stderr,
                    });
                }
            }
        }
        let scale = estimates.iter().fold(1.0f64, |a, e| a.max(e.0.abs()));
        let gap = band_gap(&estimates);
        let name = if level == 0 { "single_band".to_string() } else { format!("single_band_paths_x{}", 1usize << level) };
        let lo = estimates.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
        let hi = estimates.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        let check = Check::at_most(
            name,
            gap,
            1e-12 * scale,
            format!("{} estimates at {n_paths} paths in [{lo}, {hi}]", estimates.len()),
        );
        if !check.pass {
            failed_levels += 1;
        }
        res.checks.push(check);
        if let (0, Some(frac)) = (level, checks.band_fraction) {
            let denom = reference.map(|r| r.0).unwrap_or(0.5 * (lo + hi)).abs();
            res.checks.push(Check::at_most("band_width", (hi - lo) / denom, frac, "spread of estimates relative to the value"));
        }
    }
    if checks.path_levels > 1 {
        res.checks.push(Check::at_most(
            "no_persistent_split",
            failed_levels as f64,
            (checks.path_levels - 1) as f64,
            "path-count levels without a common band",
        ));
    }
    let csv = res.values_csv();
    res.artifacts.push(Artifact { name: "estimates.csv".into(), bytes: csv });
    Ok(res)
}

fn with_delta(cps: &ControlProblemSpec, delta: f64) -> ProblemDef {
    ProblemDef::Control(ControlProblemSpec { delta, ..cps.clone() })
}

/// Finite-difference `v(0, x0)` over the perturbation sizes in
/// `checks.deltas`. Duplicates are removed; the table is sorted by delta.
pub fn run_delta_sweep(base: &ControlProblemSpec, numerics: &Numerics, checks: &Checks) -> Result<ExperimentResult, HarnessError> {
    let mut deltas: Vec<f64> = Vec::new();
    for &d in &checks.deltas {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(HarnessError::Config(format!("delta values must be finite and nonnegative, got {d}")));
        }
        let d = d + 0.0; // -0 -> 0
        if !deltas.contains(&d) {
            deltas.push(d);
        }
    }
    deltas.sort_by(f64::total_cmp);
    if deltas.first() != Some(&0.0) {
        return Err(HarnessError::Config("delta values must include 0".into()));
    }
    let mut res = ExperimentResult::new("delta_sweep");
    let solve = |d: f64| -> Result<f64, HarnessError> {
        let problem = with_delta(base, d);
        check_problem(&problem)?;
        let numerics = Numerics { pde_boundary: BoundaryChoice::LinearExtrapolation, ..numerics.clone() };
        let fwd = problem.forward();
        let spec = problem.driver();
        let sgrid = match numerics.pde_domain {
            Some((lo, hi)) => SpaceGrid::new(lo, hi, numerics.pde_points),
            None => SpaceGrid::default_for(&fwd, numerics.pde_points),
        }
        .map_err(|e| route_err("pde")(e.to_string()))?;
        let tgrid = TimeGrid::new(0.0, fwd.horizon, numerics.pde_steps).map_err(|e| route_err("pde")(e.to_string()))?;
        let sol = solve_pde(&fwd, &spec, &sgrid, &tgrid, numerics.pde_scheme, &BoundaryPolicy::LinearExtrapolation)
            .map_err(|e| route_err("pde")(e.to_string()))?;
        Ok(sol.initial_value(fwd.x0))
    };
    let values = deltas.iter().map(|&d| solve(d)).collect::<Result<Vec<_>, _>>()?;
    res.resolutions.push(("pde".into(), format!("{}x{} ({})", numerics.pde_points, numerics.pde_steps, numerics.pde_scheme.name())));
    for (&d, &v) in deltas.iter().zip(&values) {
        res.values.push(RouteValue {
            route: format!("pde[delta={d}]"),
            seed: None,
            basis: None,
            n_paths: 0,
            n_steps: numerics.pde_steps,
            value: v,
            error: f64::NAN,
        });
    }

    let riccati = with_delta(base, 0.0).riccati(numerics.riccati_steps)?.expect("linear problem");
    let anchor = riccati.initial_value();
    res.checks.push(Check::at_most(
        "anchor",
        (values[0] - anchor).abs(),
        checks.anchor_tolerance,
        format!("pde={} riccati={anchor}", values[0]),
    ));

    // halving each gap should shrink the change in v
    if deltas.len() > 1 {
        let mut worst = 0.0f64;
        for w in 0..deltas.len() - 1 {
            let (a, b) = (deltas[w], deltas[w + 1]);
            let full = (values[w + 1] - values[w]).abs();
            if full <= 1e-12 {
                continue;
            }
            let mid = solve(0.5 * (a + b))?;
            let half = (mid - values[w]).abs().max((values[w + 1] - mid).abs());
            worst = worst.max(half / full);
        }
        res.checks.push(Check::at_most(
            "continuity",
            worst,
            checks.continuity_ratio,
            "largest |v(mid) - v(end)| / |v(b) - v(a)| over adjacent deltas",
        ));
        let diffs: Vec<f64> = values.windows(2).map(|p| p[1] - p[0]).collect();
        let trend = if diffs.iter().all(|&d| d < 0.0) {
            "decreasing"
        } else if diffs.iter().all(|&d| d > 0.0) {
            "increasing"
        } else {
            "not monotone"
        };
        res.notes.push(format!("v(0, x0) is {trend} in delta"));
    }

    if checks.spot_check {
        let seed = *numerics.seeds.first().ok_or_else(|| HarnessError::Config("no seed given".into()))?;
        let family = *numerics.bases.first().ok_or_else(|| HarnessError::Config("no basis given".into()))?;
        res.seeds.push(seed);
        let ends = [(0usize, deltas[0]), (deltas.len() - 1, deltas[deltas.len() - 1])];
        for (idx, d) in ends.iter().take(if deltas.len() > 1 { 2 } else { 1 }) {
            let problem = with_delta(base, *d);
            let grid = TimeGrid::new(0.0, base.horizon, numerics.mc_steps).map_err(|e| HarnessError::Config(e.to_string()))?;
            let ens = ensembles(&problem, &grid, numerics.mc_paths, seed, false)?;
            let sol = run_route(Route::Direct, &problem, &ens, family, numerics.bsde_scheme)?;
            res.values.push(RouteValue {
                route: format!("lsmc_direct[delta={d}]"),
                seed: Some(seed),
                basis: Some(family.to_string()),
                n_paths: numerics.mc_paths,
                n_steps: numerics.mc_steps,
                value: sol.y0,
                error: sol.y0_stderr,
            });
            res.checks.push(Check::at_most(
                format!("spot_check[delta={d}]"),
                (sol.y0 - values[*idx]).abs(),
                3.0 * sol.y0_stderr,
                format!("lsmc_direct={} pde={}", sol.y0, values[*idx]),
            ));
        }
    }

    let mut table = String::from("delta,v0\n");
    for (d, v) in deltas.iter().zip(&values) {
        let _ = writeln!(table, "{d},{v}");
    }
    res.artifacts.push(Artifact { name: "sweep.csv".into(), bytes: table.into_bytes() });
    Ok(res)
}

/// Ranks feedback policies by simulated cost on common noise. The feedback
/// read off the finite-difference solution must come first, by a margin of
/// three paired standard errors over each alternative.
pub fn run_policy_ranking(cps: &ControlProblemSpec, numerics: &Numerics, checks: &Checks) -> Result<ExperimentResult, HarnessError> {
    let problem = ProblemDef::Control(cps.clone());
    check_problem(&problem)?;
    let seed = *numerics.seeds.first().ok_or_else(|| HarnessError::Config("no seed given".into()))?;
    if checks.policies.len() < 2 {
        return Err(HarnessError::Config("policy ranking needs at least two policies".into()));
    }
    let mut res = ExperimentResult::new("policy_ranking");
    res.seeds.push(seed);
    let riccati = problem.riccati(numerics.riccati_steps)?;
    let numerics_pde = Numerics { pde_boundary: BoundaryChoice::LinearExtrapolation, ..numerics.clone() };
    let pde = pde_route(&problem, &numerics_pde, None, false)?;
    let feedback = extract_feedback(&pde.sol, cps);
    let mut policies = Vec::new();
    for choice in &checks.policies {
        let policy = match choice {
            PolicyChoice::PdeFeedback => feedback.clone(),
            PolicyChoice::Riccati => ControlPolicy::RiccatiFeedback(
                riccati.clone().ok_or_else(|| HarnessError::Config("riccati policy needs delta = 0".into()))?,
            ),
            PolicyChoice::Zero => ControlPolicy::Zero,
            PolicyChoice::Constant(c) => ControlPolicy::Constant(*c),
        };
        policies.push((choice.name(), policy));
    }
    let grid = TimeGrid::new(0.0, cps.horizon, numerics.policy_steps).map_err(|e| HarnessError::Config(e.to_string()))?;
    let table = compare_policies_with(cps, &policies, &grid, numerics.policy_paths, seed, checks.u_max)
        .map_err(|e| route_err("policy")(e.to_string()))?;
    res.resolutions.push(("pde".into(), pde.levels.clone()));
    res.resolutions.push(("policy".into(), format!("{} paths x {} steps", numerics.policy_paths, numerics.policy_steps)));
    for row in &table.rows {
        res.values.push(RouteValue {
            route: format!("cost[{}]", row.name),
            seed: Some(seed),
            basis: None,
            n_paths: numerics.policy_paths,
            n_steps: numerics.policy_steps,
            value: row.mean_cost,
            error: row.stderr,
        });
    }
    let star = PolicyChoice::PdeFeedback.name();
    if policies.iter().any(|(n, _)| *n == star) {
        let first = table.best().name == star;
        res.checks.push(Check {
            criterion: "optimal_ranks_first".into(),
            observed: if first { 1.0 } else { 0.0 },
            tolerance: 1.0,
            relation: Relation::AtLeast,
            pass: first,
            detail: format!("best policy {}", table.best().name),
        });
        if first {
            for row in table.rows.iter().skip(1) {
                if row.name == PolicyChoice::Riccati.name() {
                    continue;
                }
                res.checks.push(Check::at_least(
                    format!("paired_gap[{}]", row.name),
                    row.paired_diff_vs_best / row.paired_stderr,
                    3.0,
                    format!("gap {} stderr {}", row.paired_diff_vs_best, row.paired_stderr),
                ));
            }
        }
        if let Some(r) = &riccati {
            let me = table.row(&star).expect("listed policy");
            let v = r.initial_value();
            res.checks.push(Check::at_most(
                "optimal_cost_vs_riccati",
                (me.mean_cost - v).abs(),
                3.0 * me.stderr,
                format!("J={} riccati={v}", me.mean_cost),
            ));
        }
    }
    res.push_csv("policies.csv".into(), |w| table.write_csv(w));
    res.pde = Some(Arc::new(pde.sol));
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::BasisFamily;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    fn deterministic() -> ProblemDef {
        let fwd = ForwardSpec::new(p("0"), p("0"), 0.3, 1.0).unwrap();
        let spec = DriverSpec::new(p("0"), p("0"), p("0"), p("0"), p("2.5"));
        ProblemDef::Driver { fwd, spec, exact: None }
    }

    fn small_numerics() -> Numerics {
        Numerics {
            pde_points: 41,
            pde_steps: 20,
            mc_paths: 200,
            mc_steps: 8,
            seeds: vec![1, 2, 3],
            bases: vec![BasisFamily::Polynomial { degree: 2 }, BasisFamily::PiecewiseLinear { n_knots: 4 }],
            ..Numerics::default()
        }
    }

    #[test]
    fn deterministic_problem_gives_exact_constant() {
        let res = run_uniqueness_check(&deterministic(), &small_numerics(), &Checks::default()).unwrap();
        // σ = 0 and H = 0 leave only the direct route
        assert_eq!(res.values.len(), 3 * 2 * 2);
        for v in &res.values {
            assert!((v.value - 2.5).abs() <= 1e-12, "{v:?}");
        }
        assert!(res.passed(), "{}", res.summary());
        assert_eq!(res.notes.len(), 2);
    }

    #[test]
    fn uniqueness_needs_three_seeds_and_two_bases() {
        let mut n = small_numerics();
        n.seeds = vec![1, 2];
        assert!(matches!(run_uniqueness_check(&deterministic(), &n, &Checks::default()), Err(HarnessError::Config(_))));
        let mut n = small_numerics();
        n.bases.truncate(1);
        assert!(matches!(run_uniqueness_check(&deterministic(), &n, &Checks::default()), Err(HarnessError::Config(_))));
    }

    #[test]
    fn band_gap_detects_split() {
        assert!(band_gap(&[(1.0, 0.1), (1.5, 0.1)]) <= 0.0);
        assert!(band_gap(&[(1.0, 0.1), (1.7, 0.1)]) > 0.0);
    }

    #[test]
    fn sweep_deduplicates_and_anchors() {
        let base = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
        let numerics = Numerics { pde_points: 201, pde_steps: 200, ..Numerics::default() };
        let checks = Checks { deltas: vec![0.1, 0.0, 0.1, 0.05, 0.0], ..Checks::default() };
        let res = run_delta_sweep(&base, &numerics, &checks).unwrap();
        assert_eq!(res.values.len(), 3);
        let table = String::from_utf8(res.artifacts[0].bytes.clone()).unwrap();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(1).unwrap().starts_with("0,"));
        assert!(res.check("anchor").unwrap().observed < 1e-2);
        assert!(res.check("continuity").unwrap().pass, "{}", res.summary());
    }

    #[test]
    fn sweep_rejects_negative_or_missing_zero() {
        let base = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
        let n = Numerics::default();
        let bad = Checks { deltas: vec![0.0, -0.1], ..Checks::default() };
        assert!(run_delta_sweep(&base, &n, &bad).is_err());
        let bad = Checks { deltas: vec![0.1], ..Checks::default() };
        assert!(run_delta_sweep(&base, &n, &bad).is_err());
    }

    #[test]
    fn summary_has_one_line_per_check() {
        let mut res = ExperimentResult::new("x");
        res.checks.push(Check::at_most("a", 1.0, 2.0, ""));
        res.checks.push(Check::at_least("b", 1.0, 2.0, "detail"));
        let s = res.summary();
        assert!(s.contains("PASS a observed=1.000000e0 tolerance<=2.000000e0"));
        assert!(s.contains("FAIL b"));
        assert!(s.ends_with("overall: FAIL\n"));
    }

    #[test]
    fn route_failure_carries_tag() {
        let e = route_err("lsmc_direct")("boom".into());
        assert_eq!(e.to_string(), "lsmc_direct: boom");
    }
}
