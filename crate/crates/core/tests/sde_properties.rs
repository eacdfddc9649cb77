use proptest::prelude::*;
use qbsde::expr::Expr;
use qbsde::problem::ForwardSpec;
use qbsde::sde::{simulate, simulate_with_increments, Scheme, TimeGrid};

fn p(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_ensemble_for_any_pool(seed in any::<u64>(), n_paths in 1usize..300, n_steps in 1usize..40) {
        let fwd = ForwardSpec::new(p("-0.5*x^3 + sin(t)"), p("1 + 0.1*cos(x)"), 0.3, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let a = in_pool(1, || simulate(&fwd, &grid, n_paths, seed, Scheme::TamedEuler).unwrap());
        let b = in_pool(3, || simulate(&fwd, &grid, n_paths, seed, Scheme::TamedEuler).unwrap());
        prop_assert_eq!(a.states, b.states);
        prop_assert_eq!(a.dw, b.dw);
    }

    #[test]
    fn brownian_motion_is_reproduced_exactly(seed in any::<u64>(), x0 in -2.0f64..2.0) {
        let fwd = ForwardSpec::new(p("0"), p("1"), x0, 2.0).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 16).unwrap();
        let ens = simulate(&fwd, &grid, 50, seed, Scheme::Euler).unwrap();
        for i in 0..50 {
            let mut x = x0;
            for k in 0..16 {
                x += ens.dw[[k, i]];
                prop_assert_eq!(ens.states[[k + 1, i]], x);
            }
        }
    }

    #[test]
    fn taming_gap_is_second_order_per_step(a in 0.2f64..3.0, x0 in 0.5f64..3.0) {
        // one step of dX = -a X dt + dW with matched noise: the gap between
        // tamed and plain Euler is dt^2 mu^2 / (1 + dt |mu|)
        let gap = |h: f64| {
            let fwd = ForwardSpec::new(p(&format!("-{a}*x")), p("1"), x0, h).unwrap();
            let grid = TimeGrid::new(0.0, h, 1).unwrap();
            let dw = ndarray::Array2::from_elem((1, 1), 0.1 * h.sqrt());
            let e = simulate_with_increments(&fwd, &grid, dw.clone(), 0, Scheme::Euler).unwrap();
            let t = simulate_with_increments(&fwd, &grid, dw, 0, Scheme::TamedEuler).unwrap();
            (e.states[[1, 0]] - t.states[[1, 0]]).abs()
        };
        let (g1, g2, g3) = (gap(2e-3), gap(1e-3), gap(5e-4));
        prop_assert!((g1 / g2 - 4.0).abs() < 0.2, "ratio {}", g1 / g2);
        prop_assert!((g2 / g3 - 4.0).abs() < 0.1, "ratio {}", g2 / g3);
    }
}

#[test]
fn cubic_drift_moments_are_stable_under_step_halving() {
    let fwd = ForwardSpec::new(p("-0.1*x^3"), p("1"), 1.0, 1.0).unwrap();
    let coarse_grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
    let fine = simulate(&fwd, &coarse_grid.refined(), 20_000, 5, Scheme::TamedEuler).unwrap();
    let coarse = simulate_with_increments(&fwd, &coarse_grid, fine.coarsened_increments().unwrap(), 5, Scheme::TamedEuler).unwrap();
    let max_abs = fine.states.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs.is_finite() && max_abs < 20.0, "max |X| = {max_abs}");
    for p in [2, 4, 6, 8] {
        let (mc, mf) = (coarse.terminal_moment(p), fine.terminal_moment(p));
        assert!((mc - mf).abs() / mf < 0.02 * p as f64 / 2.0, "moment {p}: {mc} vs {mf}");
    }
}

#[test]
fn large_cubic_drift_stays_finite_with_taming() {
    let fwd = ForwardSpec::new(p("-5*x^3"), p("1"), 10.0, 1.0).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let ens = simulate(&fwd, &grid, 500, 1, Scheme::TamedEuler).unwrap();
    assert!(ens.states.iter().all(|v| v.is_finite()));
    let plain = simulate(&fwd, &grid, 500, 1, Scheme::Euler);
    assert!(plain.is_err(), "plain Euler should blow up on this drift");
}
