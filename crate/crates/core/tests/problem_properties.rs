use proptest::prelude::*;
use qbsde::expr::Expr;
use qbsde::kappa::Identity;
use qbsde::problem::{
    check_condition1, eval_driver, eval_girsanov_driver, Clause, ConditionInputs, ControlProblemSpec, DriverSpec,
    ForwardSpec, SamplingGrid, Witness, DEFAULT_GAMMA,
};

fn p(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn coef() -> impl Strategy<Value = f64> {
    -3.0f64..3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn driver_is_exactly_quadratic_in_z(
        big_h in 0.0f64..5.0, a in coef(), b in coef(), c in coef(),
        t in 0.0f64..1.0, x in coef(), y in coef(), z in coef(), dz in 0.01f64..2.0,
    ) {
        let spec = DriverSpec::new(
            p(&format!("{a}*x^2 + {b}")),
            p(&format!("{c}*x + t")),
            p(&format!("{b}*y")),
            Expr::constant(big_h),
            p("x"),
        );
        let f = |z: f64| eval_driver(&spec, t, x, y, z).unwrap();
        let second = f(z + dz) - 2.0 * f(z) + f(z - dz);
        let scale = f(z).abs().max(f(z + dz).abs()).max(f(z - dz).abs()).max(1.0);
        prop_assert!((second + big_h * dz * dz).abs() <= 1e-12 * scale, "{second} vs {}", -big_h * dz * dz);
    }

    #[test]
    fn girsanov_shift_is_linear_with_drift_ratio(
        a in coef(), b in coef(), s in 0.2f64..3.0, t in 0.0f64..1.0, x in coef(), z1 in coef(), z2 in coef(),
    ) {
        prop_assume!((z1 - z2).abs() > 1e-3);
        let fwd = ForwardSpec::new(p(&format!("{a}*x + {b}")), Expr::constant(s), 0.0, 1.0).unwrap();
        let spec = DriverSpec::new(p("x^2"), p("0"), p("0"), p("0.5"), p("0"));
        let shift = |z: f64| eval_girsanov_driver(&spec, &fwd, t, x, 0.0, z).unwrap() - eval_driver(&spec, t, x, 0.0, z).unwrap();
        let slope = (shift(z2) - shift(z1)) / (z2 - z1);
        let expected = (a * x + b) / s;
        prop_assert!((slope - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{slope} vs {expected}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbed_tracking_problem_satisfies_every_clause(
        b0 in 0.5f64..3.0, k1 in 0.2f64..4.0, s0 in 0.3f64..2.0, amp in 0.0f64..2.0, delta in 0.0f64..1.0, k2 in 0.0f64..2.0,
        n_t in 2usize..15, n_x in 2usize..25, n_uv in 1usize..10,
    ) {
        let cps = ControlProblemSpec {
            a: p("0.3"),
            b: p(&format!("{b0} + 0.2*cos(t)")),
            sigma: p(&format!("{s0} + 0.1*sin(t)")),
            delta,
            xi: p(&format!("{amp}*sin(3*t)")),
            k1: Expr::constant(k1),
            k2,
            x0: 0.5,
            horizon: 1.0,
        };
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: DEFAULT_GAMMA };
        let grid = SamplingGrid::new(n_t, -3.0, 3.0, n_x, n_uv);
        let report = check_condition1(&cps.driver(), &cps.forward(), &grid, &inputs).unwrap();
        prop_assert!(report.uniqueness_hypothesis_holds(), "{}", report.summary());
        for clause in Clause::ALL {
            prop_assert!(report.verdict(clause).holds(), "{}", report.summary());
        }
    }

    #[test]
    fn witnesses_reproduce_violations(a in 0.05f64..0.95, c in 0.1f64..3.0) {
        let fwd = ForwardSpec::new(p("0"), p("1"), 0.0, 1.0).unwrap();
        let phi = p("0");
        let inputs = ConditionInputs { kappa: &Identity, phi: &phi, gamma: DEFAULT_GAMMA };
        let grid = SamplingGrid::new(21, -2.0, 2.0, 17, 4);

        let spec = DriverSpec::new(p("x^2"), p("0"), p("0"), p(&format!("t - {a}")), p("0"));
        let report = check_condition1(&spec, &fwd, &grid, &inputs).unwrap();
        match report.verdict(Clause::PositiveH).witness() {
            Some(Witness::Time { t }) => prop_assert!(spec.h_of_t(t).unwrap() <= 1e-8),
            other => prop_assert!(false, "unexpected witness {other:?}"),
        }

        let spec = DriverSpec::new(p(&format!("x^2 - {c}")), p("0"), p("0"), p("1"), p("0"));
        let report = check_condition1(&spec, &fwd, &grid, &inputs).unwrap();
        match report.verdict(Clause::NonnegativeF).witness() {
            Some(Witness::Point { t, x }) => prop_assert!(spec.f.at(t, x) < 0.0),
            other => prop_assert!(false, "unexpected witness {other:?}"),
        }
    }
}
