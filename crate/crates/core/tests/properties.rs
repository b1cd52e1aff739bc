//! Property tests over randomized inputs.

use proptest::prelude::*;
use seedless_di::bell::{
    chsh_value, shifted_chsh_operator, RoundDevices, ShiftedChshParams, S_MAX, S_MIN,
};
use seedless_di::extractor::{random_table, walsh_deviations};
use seedless_di::linalg::{hermiticity_error, random_density, trace_of_product};
use seedless_di::protocol::{
    output_length, output_length_from_bits, output_length_mbit, run_protocol, DeviceModel, HonestDevice,
    ProtocolConfig, Tag,
};
use seedless_di::rates::{
    constraint_residuals, maximize, solve, Mode, RateProblem, Weights, Q0_CLASSICAL, Q0_TSIRELSON,
};
use seedless_di::rng::seeded;

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Xor), Just(Mode::Mbit)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chsh_value_is_linear_in_the_state(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let mut rng = seeded(seed);
        let d = RoundDevices::random_bloch(&mut rng);
        let (r1, r2) = (random_density(4, 4, &mut rng), random_density(4, 2, &mut rng));
        let mixed = r1.scale(lambda) + r2.scale(1.0 - lambda);
        let lhs = chsh_value(&mixed, &d).unwrap();
        let rhs = lambda * chsh_value(&r1, &d).unwrap() + (1.0 - lambda) * chsh_value(&r2, &d).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn shifted_expectation_matches_chsh(seed in any::<u64>(), s in S_MIN..S_MAX) {
        let mut rng = seeded(seed);
        let d = RoundDevices::random_bloch(&mut rng);
        let rho = random_density(4, 3, &mut rng);
        let p = ShiftedChshParams::new(s).unwrap();
        let direct = trace_of_product(&rho, &shifted_chsh_operator(&p, &d)).re;
        prop_assert!((direct - p.expectation(chsh_value(&rho, &d).unwrap())).abs() < 1e-10);
    }

    #[test]
    fn key_bias_is_bounded_by_shifted_expectation(seed in any::<u64>(), s in S_MIN..S_MAX) {
        let mut rng = seeded(seed);
        let d = RoundDevices::random_xz(&mut rng);
        let rho = random_density(4, 4, &mut rng);
        let p = ShiftedChshParams::new(s).unwrap();
        let bias = trace_of_product(&rho, &d.key_bias_operator()).re.abs();
        let bound = trace_of_product(&rho, &shifted_chsh_operator(&p, &d)).re;
        prop_assert!(bias <= bound + 1e-9);
    }

    #[test]
    fn shifted_operator_is_hermitian(seed in any::<u64>(), s in S_MIN..S_MAX) {
        let mut rng = seeded(seed);
        let d = RoundDevices::random_bloch(&mut rng);
        let p = ShiftedChshParams::new(s).unwrap();
        prop_assert!(hermiticity_error(&shifted_chsh_operator(&p, &d)) < 1e-12);
    }

    #[test]
    fn walsh_deviations_satisfy_parseval(seed in any::<u64>(), n in 3u32..=10, m in 1u32..=3) {
        let mut rng = seeded(seed);
        let g = random_table(n, m, &mut rng).unwrap();
        let scale = f64::from(1u32 << m);
        for k in 0..1u32 << m {
            let w = walsh_deviations(&g, k);
            let energy: f64 = w.iter().map(|v| v * v).sum();
            let direct: f64 = g
                .values()
                .iter()
                .map(|&v| {
                    let f = if v == k { 1.0 - 1.0 / scale } else { -1.0 / scale };
                    f * f
                })
                .sum();
            prop_assert!((energy - direct * (1u64 << n) as f64).abs() <= 1e-9 * energy.max(1.0));
        }
    }

    #[test]
    fn zero_frequency_counts_preimages(seed in any::<u64>(), n in 3u32..=10, m in 1u32..=3) {
        let mut rng = seeded(seed);
        let g = random_table(n, m, &mut rng).unwrap();
        let counts = g.preimage_counts();
        for k in 0..1u32 << m {
            let expected = counts[k as usize] as f64 - f64::from(1u32 << (n - m));
            prop_assert!((walsh_deviations(&g, k)[0] - expected).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solutions_satisfy_constraints(mode in mode_strategy(), p_e in 0.05f64..0.9999, q0 in Q0_CLASSICAL..=Q0_TSIRELSON) {
        let sol = solve(&RateProblem::new(mode, p_e, q0).unwrap());
        prop_assert!(sol.feasible);
        for r in constraint_residuals(mode, p_e, &sol) {
            prop_assert!(r.abs() <= 1e-10, "residual {r}");
        }
    }

    #[test]
    fn objective_recomputes_from_the_solution(mode in mode_strategy(), p_e in 0.05f64..0.9999, q0 in Q0_CLASSICAL..=Q0_TSIRELSON) {
        let problem = RateProblem::new(mode, p_e, q0).unwrap();
        let sol = solve(&problem);
        // alpha_z from the saturated constraints, K_z = (1 +) mu -+ 4 nu.
        let root = (2.0 - sol.s * sol.s / 4.0).sqrt();
        let (mu, nu) = (2.0 / root, sol.s / (4.0 * root));
        let shift = if mode == Mode::Mbit { 1.0 } else { 0.0 };
        let c = (1.0 - p_e) * 2f64.sqrt().powf(sol.beta - 1.0);
        let a0 = 2.0 * ((1.0 - c * (shift + mu - 4.0 * nu)) / p_e).log2();
        let a1 = 2.0 * ((1.0 - c * (shift + mu + 4.0 * nu)) / p_e).log2();
        let value = p_e * (q0 * a0 + (1.0 - q0) * a1) + (1.0 - p_e) * sol.beta;
        prop_assert!((value - sol.objective).abs() <= 1e-9 * (1.0 + value.abs()));
        let reported = problem.weights().evaluate(sol.alpha0, sol.alpha1, sol.beta);
        prop_assert!((reported - sol.objective).abs() <= 1e-12 * (1.0 + reported.abs()));
    }

    #[test]
    fn output_length_ignores_outcome_order(mode in mode_strategy(), seed in any::<u64>(), n_e in 1usize..200, n_r in 1usize..400) {
        use rand::seq::SliceRandom;
        let mut rng = seeded(seed);
        let mut z: Vec<u8> = (0..n_e).map(|i| u8::from(i % 7 == 0)).collect();
        let before = output_length_from_bits(mode, &z, n_r, 0.9, 0.5).m;
        z.shuffle(&mut rng);
        prop_assert_eq!(before, output_length_from_bits(mode, &z, n_r, 0.9, 0.5).m);
    }

    #[test]
    fn output_length_is_zero_without_either_round_type(mode in mode_strategy(), n in 0usize..1000) {
        prop_assert_eq!(output_length(mode, n, 0, 0, 0.9, 1e-3).m, 0);
        prop_assert_eq!(output_length(mode, 0, 0, n, 0.9, 1e-3).m, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn round_tags_follow_the_estimation_probability(seed in any::<u64>(), p_e in 0.05f64..0.95) {
        let n = 20_000;
        let cfg = ProtocolConfig {
            n,
            p_e,
            epsilon: 1e-6,
            mode: Mode::Xor,
            seed,
            device: DeviceModel::Honest(HonestDevice::singlet()),
            cache_dir: None,
        };
        let t = run_protocol(&cfg).unwrap();
        let n_e = t.tags.iter().filter(|&&tag| tag == Tag::Estimation).count();
        prop_assert_eq!(n_e, t.n_e);
        prop_assert_eq!(n_e + t.n_r, n);
        let sigma = (n as f64 * p_e * (1.0 - p_e)).sqrt();
        prop_assert!((n_e as f64 - n as f64 * p_e).abs() <= 5.0 * sigma);
    }
}

/// At `n = 10^6` the objective per raw bit matches the asymptotic extraction
/// rate, and the floor differs from it only by the finite-size terms.
#[test]
fn mbit_length_is_asymptotically_consistent() {
    let n = 1_000_000usize;
    let epsilon = 1e-6;
    for (p_e, q0) in [(0.99, Q0_TSIRELSON), (0.985, 0.853), (0.995, 0.852)] {
        let n_e = (p_e * n as f64).round() as usize;
        let n0 = (q0 * n_e as f64).round() as usize;
        let n_r = n - n_e;
        let realized_q0 = n0 as f64 / n_e as f64;
        let sol = solve(&RateProblem::new(Mode::Mbit, p_e, realized_q0).unwrap());
        let r_ext = sol.objective / (1.0 - p_e);
        assert!(r_ext > 0.0, "fixture must have a positive rate");
        let len = output_length_mbit(n0, n_e - n0, n_r, p_e, epsilon);
        let per_bit = len.objective / n_r as f64;
        assert!(
            (per_bit - r_ext).abs() <= 2e-3,
            "pE {p_e}: objective per raw bit {per_bit} vs rate {r_ext}"
        );
        let finite = 2.0 * (1.0 / epsilon).log2() + 4.0 * (n_r as f64).log2();
        let predicted = (len.objective - finite).floor().max(0.0);
        assert!((f64::from(len.m) - predicted).abs() <= 1.0, "m = {} vs {predicted}", len.m);
    }
}

/// Weight scaling leaves the maximizer unchanged.
#[test]
fn maximizer_is_invariant_under_weight_scaling() {
    let w = Weights { w0: 0.9 * 0.85, w1: 0.9 * 0.15, wb: 0.1 };
    let a = maximize(Mode::Xor, 0.9, w);
    let b = maximize(Mode::Xor, 0.9, Weights { w0: w.w0 * 1e4, w1: w.w1 * 1e4, wb: w.wb * 1e4 });
    assert!((b.objective - 1e4 * a.objective).abs() <= 1e-6 * b.objective.abs());
}
