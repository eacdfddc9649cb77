use std::sync::Arc;

use proptest::prelude::*;
use qbsde::control::{compare_policies, estimate_cost, solve_riccati, ControlPolicy};
use qbsde::expr::Expr;
use qbsde::pde::{extract_feedback, refinement_study, solve_pde, BoundaryPolicy, PdeScheme, SpaceGrid};
use qbsde::problem::ControlProblemSpec;
use qbsde::sde::TimeGrid;

fn solve(cps: &ControlProblemSpec, n_x: usize, n_t: usize) -> qbsde::pde::GridSolution {
    let sgrid = SpaceGrid::new(-4.0, 4.0, n_x).unwrap();
    let tgrid = TimeGrid::new(0.0, cps.horizon, n_t).unwrap();
    solve_pde(&cps.forward(), &cps.driver(), &sgrid, &tgrid, PdeScheme::Auto, &BoundaryPolicy::LinearExtrapolation).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn riccati_matches_closed_form(x0 in -2.0f64..2.0, horizon in 0.2f64..3.0) {
        // P = tanh(T - t), r = ln cosh(T - t)
        let cps = ControlProblemSpec::benchmark(0.0, x0, horizon);
        let sol = solve_riccati(&cps, &TimeGrid::new(0.0, horizon, 400).unwrap()).unwrap();
        let exact = horizon.tanh() * x0 * x0 + horizon.cosh().ln();
        prop_assert!((sol.initial_value() - exact).abs() < 1e-9, "{} vs {exact}", sol.initial_value());
        prop_assert_eq!(*sol.p.last().unwrap(), 0.0);
        prop_assert_eq!(*sol.q.last().unwrap(), 0.0);
        prop_assert_eq!(*sol.r.last().unwrap(), 0.0);
    }

    #[test]
    fn riccati_coefficients_respect_terminal_weight(k2 in 0.0f64..3.0, a in -1.0f64..1.0, xi in -1.0f64..1.0) {
        let cps = ControlProblemSpec { a: Expr::constant(a), xi: Expr::constant(xi), k2, ..ControlProblemSpec::benchmark(0.0, 0.5, 1.0) };
        let sol = solve_riccati(&cps, &TimeGrid::new(0.0, 1.0, 200).unwrap()).unwrap();
        prop_assert!((sol.p.last().unwrap() - k2).abs() < 1e-15);
        prop_assert!((sol.q.last().unwrap() + 2.0 * k2 * xi).abs() < 1e-12);
        prop_assert!((sol.r.last().unwrap() - k2 * xi * xi).abs() < 1e-12);
        prop_assert!(sol.p.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn riccati_converges_at_fourth_order() {
    let cps = ControlProblemSpec { a: Expr::constant(0.4), k2: 2.0, ..ControlProblemSpec::benchmark(0.0, 1.0, 2.0) };
    let v = |n| solve_riccati(&cps, &TimeGrid::new(0.0, 2.0, n).unwrap()).unwrap().initial_value();
    let (a, b, c) = (v(40), v(80), v(160));
    let ratio = (a - b) / (b - c);
    assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
}

#[test]
fn pde_terminal_row_is_exact_and_values_are_nonnegative() {
    let cps = ControlProblemSpec { k2: 1.5, xi: Expr::parse("0.3*sin(2*t)").unwrap(), ..ControlProblemSpec::benchmark(0.1, 1.0, 1.0) };
    let sol = solve(&cps, 161, 200);
    let n = sol.tgrid.n_steps;
    for (i, x) in sol.sgrid.points().into_iter().enumerate() {
        let g = cps.terminal_cost(x);
        assert!((sol.v[[n, i]] - g).abs() <= 1e-14 * g.max(1.0), "{} vs {g}", sol.v[[n, i]]);
    }
    let min = sol.v.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    assert!(min >= -1e-10, "min v = {min}");
}

#[test]
fn symmetric_problem_has_even_value_and_zero_control_at_origin() {
    for delta in [0.0, 0.1] {
        let cps = ControlProblemSpec::benchmark(delta, 1.0, 1.0);
        let sol = solve(&cps, 201, 400);
        let m = sol.sgrid.n_points;
        for k in [0, sol.tgrid.n_steps / 2] {
            for i in 0..m / 2 {
                let (l, r) = (sol.v[[k, i]], sol.v[[k, m - 1 - i]]);
                assert!((l - r).abs() <= 1e-10 * l.abs().max(1.0), "delta {delta}: v({k},{i}) {l} vs {r}");
            }
        }
        let u = extract_feedback(&sol, &cps);
        for t in [0.0, 0.25, 0.5, 0.75] {
            assert!(u.control(t, 0.0).abs() < 1e-10, "u*({t}, 0) = {}", u.control(t, 0.0));
        }
    }
}

#[test]
fn pde_agrees_with_benchmark_and_converges() {
    let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
    let exact = 1f64.tanh() + 1f64.cosh().ln();
    let sgrid = SpaceGrid::new(-8.0, 8.0, 161).unwrap();
    let tgrid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let study = refinement_study(
        &cps.forward(),
        &cps.driver(),
        &sgrid,
        &tgrid,
        PdeScheme::Auto,
        &BoundaryPolicy::LinearExtrapolation,
        Some((-3.0, 3.0)),
    )
    .unwrap();
    assert!((1.6..=4.5).contains(&study.ratio), "ratio {}", study.ratio);
    let errs: Vec<f64> = study.values.iter().map(|v| (v - exact).abs()).collect();
    assert!(errs[2] < errs[0], "{errs:?}");
    assert!(errs[2] < 5e-3, "{errs:?}");
}

#[test]
fn exact_boundary_matches_benchmark_closely() {
    let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
    let ric = Arc::new(solve_riccati(&cps, &TimeGrid::new(0.0, 1.0, 2000).unwrap()).unwrap());
    let profile = ric.profile();
    let sgrid = SpaceGrid::new(-3.0, 3.0, 241).unwrap();
    let tgrid = TimeGrid::new(0.0, 1.0, 800).unwrap();
    let boundary = BoundaryPolicy::DirichletFromProfile(Arc::new(profile));
    let sol = solve_pde(&cps.forward(), &cps.driver(), &sgrid, &tgrid, PdeScheme::Auto, &boundary).unwrap();
    let exact = 1f64.tanh() + 1f64.cosh().ln();
    assert!((sol.initial_value(1.0) - exact).abs() < 2e-3, "{}", sol.initial_value(1.0));
}

#[test]
fn no_constant_policy_beats_the_optimum() {
    let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let v = 1f64.tanh() + 1f64.cosh().ln();
    for c in [-1.0, -0.3, 0.0, 0.3, 1.0] {
        let est = estimate_cost(&cps, &ControlPolicy::Constant(c), &grid, 20_000, 21).unwrap();
        assert!(est.mean >= v - 3.0 * est.stderr, "constant {c}: {} < {v}", est.mean);
    }
}

#[test]
fn policy_comparison_is_reproducible_and_ranks_riccati_first() {
    let cps = ControlProblemSpec::benchmark(0.0, 1.0, 1.0);
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let ric = Arc::new(solve_riccati(&cps, &grid).unwrap());
    let policies = vec![
        ("riccati".to_string(), ControlPolicy::RiccatiFeedback(ric)),
        ("zero".to_string(), ControlPolicy::Zero),
        ("push".to_string(), ControlPolicy::Constant(-0.5)),
    ];
    let a = compare_policies(&cps, &policies, &grid, 10_000, 5).unwrap();
    let b = compare_policies(&cps, &policies, &grid, 10_000, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.best().name, "riccati");
    for r in &a.rows[1..] {
        assert!(r.paired_diff_vs_best > 3.0 * r.paired_stderr, "{r:?}");
    }
}
