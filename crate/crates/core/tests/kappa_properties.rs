use proptest::prelude::*;
use qbsde::kappa::{dominating_eps, product_constant, lemma2_inequality_check, osgood_divergence_probe, KappaFn};

/// `(eps, r)` with `0 < r <= 1` and `0 < eps < e^{-r}`.
fn params() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..=1.0).prop_flat_map(|r| (1e-6f64..(-r).exp() * 0.999, Just(r)))
}

/// Log-uniform point in `(1e-12, 2]`.
fn point() -> impl Strategy<Value = f64> {
    (-12.0f64..0.3).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn increasing((eps, r) in params(), a in point(), b in point()) {
        prop_assume!(a != b);
        let k = KappaFn::new(eps, r).unwrap();
        let (x, y) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(k.value(x) < k.value(y), "k({x}) = {} >= k({y}) = {}", k.value(x), k.value(y));
    }

    #[test]
    fn concave((eps, r) in params(), x in point(), y in point(), theta in 0.0f64..=1.0) {
        let k = KappaFn::new(eps, r).unwrap();
        let mid = k.value(theta * x + (1.0 - theta) * y);
        let chord = theta * k.value(x) + (1.0 - theta) * k.value(y);
        prop_assert!(mid >= chord - 1e-12, "mid {mid} chord {chord}");
    }

    #[test]
    fn branches_join_smoothly((eps, r) in params()) {
        let k = KappaFn::new(eps, r).unwrap();
        let left = eps * eps.recip().ln().powf(r);
        let right = k.value_at_eps() + k.slope_at_eps() * (eps - k.eps());
        prop_assert!((left - right).abs() <= 1e-10 * left.max(1.0));
        let d_left = k.derivative(eps).unwrap();
        let d_right = k.derivative(eps * (1.0 + 1e-12)).unwrap();
        prop_assert!((d_left - d_right).abs() <= 1e-10 * d_left.abs().max(1.0), "{d_left} vs {d_right}");
    }

    #[test]
    fn smaller_exponent_is_dominated((eps, r) in params(), xs in proptest::collection::vec(1e-9f64..=1.0, 64)) {
        prop_assume!(r < 1.0);
        let eps1 = match dominating_eps(eps, r) {
            Ok(e) => e,
            // ln(1/eps1) grows like 1 / (1 - r) and leaves the f64 range
            Err(_) => {
                prop_assert!(r > 0.999, "r = {r}");
                return Ok(());
            }
        };
        prop_assert!(eps1 > 0.0);
        prop_assert!(eps1 <= (r - 2.0).exp());
        let small = KappaFn::new(eps, r).unwrap();
        let big = KappaFn::new(eps1, 1.0).unwrap();
        for x in xs.into_iter().chain([1.0, eps, eps1]) {
            prop_assert!(small.value(x) < big.value(x), "x = {x}: {} >= {}", small.value(x), big.value(x));
        }
    }

    #[test]
    fn product_inequality_holds((eps, r) in params(), pairs in proptest::collection::vec((1e-9f64..=1.0, 1e-9f64..=1.0), 128)) {
        let k = KappaFn::new(eps, r).unwrap();
        let pairs: Vec<_> = pairs.into_iter().filter(|(x, y)| x != y).collect();
        let report = lemma2_inequality_check(&k, &pairs).unwrap();
        prop_assert_eq!(report.violation, None);
        prop_assert!(report.max_ratio <= product_constant(eps, r) * (1.0 + 1e-12));
    }

    #[test]
    fn probe_grows_as_lower_shrinks((eps, r) in params(), e in 2.0f64..6.0) {
        let k = KappaFn::new(eps, r).unwrap();
        let lower = eps * 10f64.powf(-e);
        let a = osgood_divergence_probe(&k, lower, eps).unwrap();
        let b = osgood_divergence_probe(&k, lower * lower, eps).unwrap();
        prop_assert!(b > a && a > 0.0);
    }
}

#[test]
fn dominance_near_one_is_reported_not_underflowed() {
    assert!(dominating_eps(0.1, 0.99).unwrap() > 0.0);
    assert!(dominating_eps(0.1, 1.0 - 1e-9).is_err());
}

#[test]
fn quadratic_control_grows_like_reciprocal() {
    let square = |x: f64| x * x;
    for lower in [1e-3, 1e-5, 1e-7] {
        let v = osgood_divergence_probe(&square, lower, 1.0).unwrap();
        let exact = 1.0 / lower - 1.0;
        assert!((v / exact - 1.0).abs() < 1e-6, "{v} vs {exact}");
    }
}
