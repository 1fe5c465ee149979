use proptest::prelude::*;
use refavg_core::expr::parse_expression;
use refavg_core::poisson::{residual_nodes, solve_poisson, PoissonError};
use refavg_core::stats::fit_rate;
use refavg_core::{EmpiricalSample, InvariantMeasure};

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u32..200).prop_map(|k| format!("{}", k as f64 / 8.0)),
        (1u32..50).prop_map(|k| format!("{k}e-3")),
        Just("x".to_string()),
        Just("m".to_string()),
        Just("pi".to_string()),
    ]
}

fn expression() -> impl Strategy<Value = String> {
    leaf().prop_recursive(5, 40, 2, |inner| {
        let func = prop_oneof![
            Just("sin"),
            Just("cos"),
            Just("exp"),
            Just("tanh"),
            Just("sqrt"),
            Just("abs"),
        ];
        let op = prop_oneof![Just("+"), Just("-"), Just("*"), Just("/"), Just("^")];
        prop_oneof![
            (func, inner.clone()).prop_map(|(f, a)| format!("{f}({a})")),
            inner.clone().prop_map(|a| format!("-{a}")),
            (inner.clone(), op.clone(), inner.clone()).prop_map(|(a, o, b)| format!("{a} {o} {b}")),
            (inner.clone(), op, inner).prop_map(|(a, o, b)| format!("({a}){o}({b})")),
        ]
    })
}

fn sample(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len)
}

fn he(n: usize, m: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, m);
    if n == 0 {
        return 1.0;
    }
    for k in 1..n {
        let next = m * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

proptest! {
    #[test]
    fn printed_expression_reparses_to_same_function(
        text in expression(),
        probes in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 4),
    ) {
        let Ok(first) = parse_expression(&text) else { return Ok(()); };
        let printed = first.to_string();
        let second = parse_expression(&printed).expect("printed form parses");
        prop_assert_eq!(&second.to_string(), &printed);
        for (x, m) in probes {
            match (first.eval(x, m), second.eval(x, m)) {
                (Ok(a), Ok(b)) => prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{text} -> {printed}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn ks_is_symmetric(a in sample(1..120), b in sample(1..120)) {
        let (sa, sb) = (EmpiricalSample::new(a).unwrap(), EmpiricalSample::new(b).unwrap());
        prop_assert_eq!(sa.ks_two_sample(&sb), sb.ks_two_sample(&sa));
    }

    #[test]
    fn ks_is_invariant_under_increasing_maps(a in sample(1..120), b in sample(1..120)) {
        let d = EmpiricalSample::new(a.clone()).unwrap().ks_two_sample(&EmpiricalSample::new(b.clone()).unwrap());
        let t = |v: &Vec<f64>| v.iter().map(|x| x.powi(3) + 2.0 * x).collect::<Vec<_>>();
        let s = |v: &Vec<f64>| v.iter().map(|x| (x / 400.0).exp()).collect::<Vec<_>>();
        let dt = EmpiricalSample::new(t(&a)).unwrap().ks_two_sample(&EmpiricalSample::new(t(&b)).unwrap());
        let ds = EmpiricalSample::new(s(&a)).unwrap().ks_two_sample(&EmpiricalSample::new(s(&b)).unwrap());
        prop_assert_eq!(d, dt);
        prop_assert_eq!(d, ds);
    }

    #[test]
    fn wasserstein_vanishes_exactly_on_equal_samples(
        a in sample(1..120),
        shift in any::<prop::sample::Index>(),
        bump in 1e-6f64..10.0,
    ) {
        let mut perm = a.clone();
        perm.reverse();
        let sa = EmpiricalSample::new(a.clone()).unwrap();
        prop_assert_eq!(sa.wasserstein1(&EmpiricalSample::new(perm).unwrap()), 0.0);

        let mut moved = a.clone();
        let i = shift.index(moved.len());
        moved[i] += bump;
        let w = sa.wasserstein1(&EmpiricalSample::new(moved).unwrap());
        prop_assert!(w > 0.0);
        prop_assert!((w - bump / a.len() as f64).abs() <= 1e-9 * (1.0 + bump));
    }

    #[test]
    fn rate_fit_recovers_power_laws(
        p in 0.25f64..3.0,
        c in 0.1f64..10.0,
        ratios in prop::collection::vec(1.2f64..3.0, 2..6),
    ) {
        let mut eps = vec![0.5];
        for r in ratios {
            let last = *eps.last().unwrap();
            eps.push(last / r);
        }
        let errors: Vec<f64> = eps.iter().map(|e| c * e.powf(p)).collect();
        let fit = fit_rate(&eps, &errors).unwrap();
        prop_assert!((fit.slope - p).abs() <= 1e-12 * p, "slope {} vs {}", fit.slope, p);
        prop_assert!((fit.intercept - c.ln()).abs() <= 1e-10);
        prop_assert!(fit.dropped.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn poisson_solver_inverts_the_generator_on_polynomials(
        coeffs in prop::collection::vec(-1.0f64..1.0, 1..7),
    ) {
        let measure = InvariantMeasure::standard_gaussian().unwrap();
        let f = |m: f64| -> Result<f64, PoissonError> {
            Ok(coeffs.iter().enumerate().map(|(k, c)| c * he(k + 1, m)).sum())
        };
        let psi = solve_poisson(f, 40, &measure).unwrap();
        for (k, c) in coeffs.iter().enumerate() {
            let n = k + 1;
            prop_assert!((psi.coefficients()[n] - c / n as f64).abs() <= 1e-12);
        }
        for m in residual_nodes(&measure) {
            let fm = f(m).unwrap();
            prop_assert!((-psi.apply_generator(m) - fm).abs() <= 1e-12 * (1.0 + fm.abs()));
        }
        let centering = measure.expect::<_, PoissonError>(|m| Ok(psi.eval(m))).unwrap();
        prop_assert!(centering.abs() <= 1e-12);
    }

    #[test]
    fn poisson_solver_is_linear(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        shift in -1.0f64..1.0,
    ) {
        let measure = InvariantMeasure::standard_gaussian().unwrap();
        let f = move |m: f64| (m + shift).sin();
        let g = |m: f64| m * m * m - m;
        let center = |h: &dyn Fn(f64) -> f64| measure.expect::<_, PoissonError>(|m| Ok(h(m))).unwrap();
        let (fc, gc) = (center(&f), center(&g));
        let fs = solve_poisson(|m| Ok(f(m) - fc), 40, &measure).unwrap();
        let gs = solve_poisson(|m| Ok(g(m) - gc), 40, &measure).unwrap();
        let combo = solve_poisson(|m| Ok(a * (f(m) - fc) + b * (g(m) - gc)), 40, &measure).unwrap();
        for ((cf, cg), cc) in fs.coefficients().iter().zip(gs.coefficients()).zip(combo.coefficients()) {
            prop_assert!((a * cf + b * cg - cc).abs() <= 1e-12);
        }
    }
}
