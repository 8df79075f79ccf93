use proptest::prelude::*;

use symsde::analytics::{cir_laplace, hitting_prob_brownian_drift, mu_sequence, CirParams};
use symsde::schemes::{sym_euler_step, Scheme};
use symsde::{DriftSpec, ModelSpec};

fn power_model() -> impl Strategy<Value = ModelSpec> {
    (0.05..2.0f64, 0.0..3.0f64, 0.05..1.5f64, 0.5..0.99f64, 0.0..5.0f64)
        .prop_map(|(a, beta, sigma, alpha, x0)| ModelSpec::new(DriftSpec::affine(a, beta).unwrap(), sigma, alpha, x0).unwrap())
}

proptest! {
    #[test]
    fn step_is_reflection_of_candidate(m in power_model(), x in 0.0..10.0f64, dt in 1e-4..0.5f64, dw in -3.0..3.0f64) {
        let s = sym_euler_step(x, dt, dw * dt.sqrt(), &m);
        prop_assert!(s.state >= 0.0);
        prop_assert_eq!(s.state, s.candidate.abs());
    }

    #[test]
    fn laplace_is_a_decreasing_probability_transform(
        a in 0.05..2.0f64, b in -1.0..2.0f64, sigma in 0.1..1.5f64, x in 0.0..5.0f64,
        t in 0.01..5.0f64, u in 0.0..10.0f64, du in 0.01..5.0f64,
    ) {
        let p = CirParams::new(a, b, sigma, x).unwrap();
        let l0 = cir_laplace(u, t, &p).unwrap();
        let l1 = cir_laplace(u + du, t, &p).unwrap();
        prop_assert!(l0 > 0.0 && l0 <= 1.0);
        prop_assert!(l1 <= l0);
    }

    #[test]
    fn hitting_probability_is_monotone(y0 in 0.0..3.0f64, mu in -2.0..2.0f64, t in 0.01..4.0f64, dy in 0.0..1.0f64, dt in 0.0..1.0f64) {
        let p = hitting_prob_brownian_drift(0.0, y0, mu, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(hitting_prob_brownian_drift(0.0, y0 + dy, mu, t).unwrap() <= p + 1e-15);
        prop_assert!(hitting_prob_brownian_drift(0.0, y0, mu, t + dt).unwrap() >= p - 1e-15);
    }

    #[test]
    fn mu_sequence_is_positive_and_decreasing(gamma in 1.0..10.0f64, k in 0.0..2.0f64, sigma in 0.1..2.0f64, frac in 0.01..1.0f64) {
        let dt = if k > 0.0 { frac * 0.5 / k } else { frac };
        let s = mu_sequence(gamma, dt, k, sigma, 200).unwrap();
        for j in 1..=200 {
            prop_assert!(s.log_values[j] < s.log_values[j - 1]);
            prop_assert!(s.values[j] <= s.upper_bound(j) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn scheme_ids_parse(idx in 0usize..3) {
        let s = [Scheme::Symmetrized, Scheme::Projection, Scheme::ExactCir][idx];
        prop_assert_eq!(s.id().parse::<Scheme>().unwrap(), s);
    }
}
