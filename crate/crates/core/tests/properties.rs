use proptest::prelude::*;

use ccfluid::dynamics::{simulate, step, AdaptationPolicy, IntegratorSettings};
use ccfluid::equilibrium::{build_update_functions, solve_short_term, Branch};
use ccfluid::model::{BbrFlowState, CubicFlowState, Strengths, StrengthRule, SystemState};
use ccfluid::oscillation::{iterate_longterm, limit_cycle, LongTermMode};
use ccfluid::stability::linearize;
use ccfluid::NetworkConfig;

fn config() -> impl Strategy<Value = NetworkConfig> {
    (1.0..200.0f64, 0.005..0.1f64, 0.1..0.5f64, 0.2..3.0f64)
        .prop_map(|(mbps, d, f, bdp)| NetworkConfig::from_mbps(mbps, d, f, bdp))
}

/// A valid state for `cfg` built from unit-interval fractions.
fn state_for(cfg: &NetworkConfig, fx: f64, fw: f64, fs: f64, fq: f64, ft: f64) -> SystemState {
    let bdp = cfg.capacity * cfg.path_prop_delay;
    SystemState {
        t: 0.0,
        bbr: vec![BbrFlowState {
            x_btl: cfg.chi + fx * 2.0 * cfg.capacity,
            tau_min: cfg.path_prop_delay * (1.0 + ft),
            probe_clock: f64::INFINITY,
        }],
        cubic: vec![CubicFlowState { w_max: 1.0 + fw * 4.0 * bdp, s: fs * 20.0 }],
        queue: fq * cfg.buffer,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steps_keep_the_state_valid(
        cfg in config(),
        fx in 0.0..1.0f64, fw in 0.0..1.0f64, fs in 0.0..1.0f64, fq in 0.0..1.0f64, ft in 0.0..1.0f64,
    ) {
        let mut state = state_for(&cfg, fx, fw, fs, fq, ft);
        let dt = IntegratorSettings::for_config(&cfg).dt;
        for _ in 0..200 {
            state = step(&state, &cfg, Strengths::Rule(StrengthRule::Bbrv1), dt).unwrap();
            prop_assert!(state.validate(&cfg).is_ok(), "{state:?}");
            prop_assert!(state.bbr[0].x_btl >= cfg.chi * (1.0 - 1e-12));
        }
    }

    #[test]
    fn equilibria_solve_their_polynomial(cfg in config(), alpha in 0.05..1.25f64) {
        let eq = solve_short_term(alpha, &cfg).unwrap();
        prop_assert!(eq.residual < 1e-10, "residual {}", eq.residual);
        prop_assert!(eq.x_btl_eq >= cfg.chi);
        prop_assert!(eq.loss(&cfg) > 0.0 && eq.loss(&cfg) < 1.0);
    }

    #[test]
    fn center_manifold_coefficient_is_negative(cfg in config(), alpha in 1.01..1.25f64) {
        let eq = solve_short_term(alpha, &cfg).unwrap();
        prop_assume!(eq.branch == Branch::S1 && eq.x_btl_eq > cfg.chi);
        let rep = linearize(&eq, &cfg).unwrap();
        prop_assert!(rep.k < 0.0, "K = {}", rep.k);
        prop_assert!(rep.eigenvalues[1] < 0.0 && rep.eigenvalues[2] < 0.0);
    }

    #[test]
    fn idealized_iteration_stays_between_plateaus(cfg in config(), f in 0.0..1.0f64) {
        let uf = build_update_functions(&cfg).unwrap();
        let w0 = 1.0 + f * 2.0 * uf.w_gt;
        let tr = iterate_longterm(&cfg, StrengthRule::Bbrv1, w0, 20, LongTermMode::Idealized).unwrap();
        for &w in &tr.w[1..] {
            prop_assert!(w >= uf.w_lt * (1.0 - 1e-12) && w <= uf.w_gt * (1.0 + 1e-12), "{w} outside [{}, {}]", uf.w_lt, uf.w_gt);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn cycle_attracts_from_any_start(w0 in 1.0..1500.0f64) {
        let cfg = NetworkConfig::default_dumbbell();
        let cycle = limit_cycle(&cfg).unwrap();
        let uf = build_update_functions(&cfg).unwrap();
        // the fixed point itself never leaves, so keep clear of it
        prop_assume!((w0 - uf.long_term_equilibrium().unwrap()).abs() > 1.0);
        let tr = iterate_longterm(&cfg, StrengthRule::Bbrv1, w0, 50, LongTermMode::Idealized).unwrap();
        let tail = &tr.w[tr.w.len() - 2..];
        let (lo, hi) = (tail[0].min(tail[1]), tail[0].max(tail[1]));
        prop_assert!((lo - cycle.w_hat0).abs() <= 1e-6 * cycle.w_hat0);
        prop_assert!((hi - cycle.w_hat1).abs() <= 1e-6 * cycle.w_hat1);
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), theta in 0.05..1.0f64) {
        let cfg = NetworkConfig::default_dumbbell();
        let settings = IntegratorSettings::for_config(&cfg).with_horizon(12.0);
        for policy in [AdaptationPolicy::Randomized { seed }, AdaptationPolicy::Smoothed { theta }] {
            let a = simulate(&cfg, policy, settings, SystemState::initial(&cfg, 10.0), seed).unwrap();
            let b = simulate(&cfg, policy, settings, SystemState::initial(&cfg, 10.0), seed).unwrap();
            prop_assert_eq!(&a.samples, &b.samples);
            prop_assert_eq!(&a.probes, &b.probes);
        }
    }
}

#[test]
fn iteration_leaves_the_fixed_point() {
    let cfg = NetworkConfig::default_dumbbell();
    let w_bar = build_update_functions(&cfg).unwrap().long_term_equilibrium().unwrap();
    for w0 in [w_bar * (1.0 - 1e-3), w_bar * (1.0 + 1e-3)] {
        let tr = iterate_longterm(&cfg, StrengthRule::Bbrv1, w0, 10, LongTermMode::Idealized).unwrap();
        let d: Vec<f64> = tr.w.iter().map(|w| (w - w_bar).abs()).collect();
        assert!(d[1..].iter().all(|&x| x > 10.0 * d[0]), "{d:?}");
    }
}
