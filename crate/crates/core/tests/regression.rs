//! Frozen values at the default configuration.
//!
//! The reference numbers were computed at 40 digits with a standalone
//! solver of the raw balance equations (rate balance plus the CUBIC loss
//! response), not with the branch polynomials the library uses. The
//! `oracle` module below redoes that computation in f64 so that the
//! frozen values stay explained.

#![allow(clippy::excessive_precision)]

use approx::assert_relative_eq;

use ccfluid::equilibrium::{alpha_hat, build_update_functions, solve_short_term};
use ccfluid::oscillation::{fairness_bounds, limit_cycle, WcapCase};
use ccfluid::stability::instability_condition;
use ccfluid::NetworkConfig;

const ALPHA_HAT: f64 = 1.000014368242321833;
const W_LT: f64 = 13.84306794560718728;
const W_GT: f64 = 826.6784886128528812;
const W_BAR: f64 = 232.5451846410660929;
const PHI_MAX: f64 = 0.9834433253067271252;
const PHI_MIN: f64 = 0.007999886510926606;
const BIG_W_HAT0: f64 = 162.7816292487462650;
const BIG_W_HAT1: f64 = 266.9184269495588147;
const PHI_NP_MAX: f64 = 0.8067324265030927962;
const PHI_NP_MIN: f64 = 0.6372869937165184881;
const SLOPE_AT_W_BAR: f64 = -606.64299146996155;

mod oracle {
    use ccfluid::NetworkConfig;

    pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn tau_bar(cfg: &NetworkConfig) -> f64 {
        cfg.path_prop_delay + cfg.buffer / cfg.capacity
    }

    /// Window and BBR rate where the offered load overshoots C by exactly
    /// the CUBIC loss rate. `floor` pins BBR at χ.
    pub fn balance(cfg: &NetworkConfig, alpha: f64, beta: f64, floor: bool) -> (f64, f64) {
        let (b, c, cap) = (cfg.cubic_b, cfg.cubic_c, cfg.capacity);
        let tb = tau_bar(cfg);
        let x_of = |w: f64| if floor { cfg.chi } else { cap - w / (alpha * tb) };
        let f = |s: f64| {
            let w = c / b * s.powi(3);
            let y = beta * x_of(w) + w / tb;
            b * tb / (c * s.powi(4)) - (y - cap) / y
        };
        let s0 = (b * tb / c).powf(0.25);
        let s = bisect(f, s0 * (1.0 + 1e-15), 50.0);
        let w = c / b * s.powi(3);
        (w, x_of(w))
    }

    pub fn strengths(cfg: &NetworkConfig, w: f64) -> (f64, f64) {
        let drain = 4.0 - cfg.btl_prop_delay * cfg.capacity;
        let q = ((1.0 - cfg.cubic_b) * w + drain).clamp(0.0, cfg.buffer);
        let r = (cfg.path_prop_delay + q / cfg.capacity) / tau_bar(cfg);
        ((2.0 * r).min(1.25), (2.0 * r).min(1.0))
    }

    pub fn window(cfg: &NetworkConfig, alpha: f64, beta: f64) -> f64 {
        let (w, x) = balance(cfg, alpha, beta, false);
        if x >= cfg.chi {
            w
        } else {
            balance(cfg, alpha, beta, true).0
        }
    }

    pub fn window_update(cfg: &NetworkConfig, w: f64) -> f64 {
        let (a, b) = strengths(cfg, w);
        window(cfg, a, b)
    }

    pub fn share(cfg: &NetworkConfig, w: f64, w_probe: f64) -> f64 {
        let (a, b) = strengths(cfg, w_probe);
        let xc = w / tau_bar(cfg);
        let xb = b * cfg.chi.max(cfg.capacity - xc / a);
        xb / (xb + xc)
    }
}

#[test]
fn f64_oracle_reproduces_reference_values() {
    let cfg = NetworkConfig::default_dumbbell();
    let ahat = oracle::bisect(|a| oracle::balance(&cfg, a, a.min(1.0), false).1 - cfg.chi, 0.5, 1.25);
    assert_relative_eq!(ahat, ALPHA_HAT, max_relative = 1e-12);
    assert_relative_eq!(oracle::window(&cfg, 1.25, 1.0), W_LT, max_relative = 1e-12);
    assert_relative_eq!(oracle::window(&cfg, 0.8, 0.8), W_GT, max_relative = 1e-12);
    let w_bar = oracle::bisect(|w| w - oracle::window_update(&cfg, w), W_LT, W_GT);
    assert_relative_eq!(w_bar, W_BAR, max_relative = 1e-10);
}

#[test]
fn discriminant_and_plateaus() {
    let cfg = NetworkConfig::default_dumbbell();
    assert_relative_eq!(alpha_hat(&cfg).value().unwrap(), ALPHA_HAT, max_relative = 1e-12);
    let uf = build_update_functions(&cfg).unwrap();
    assert_relative_eq!(uf.w_lt, W_LT, max_relative = 1e-11);
    assert_relative_eq!(uf.w_gt, W_GT, max_relative = 1e-11);
    assert_relative_eq!(uf.alpha_min, 0.8, max_relative = 1e-14);
    assert_relative_eq!(uf.alpha_max, 1.25, max_relative = 1e-14);
    assert_relative_eq!(uf.w0, 113.0 + 1.0 / 3.0, max_relative = 1e-6);
}

#[test]
fn library_equilibria_match_oracle() {
    let cfg = NetworkConfig::default_dumbbell();
    for alpha in [0.3, 0.8, 0.99, 1.0, 1.00002, 1.1, 1.2, 1.25] {
        let eq = solve_short_term(alpha, &cfg).unwrap();
        let want = oracle::window(&cfg, alpha, alpha.min(1.0));
        assert_relative_eq!(eq.w_max_eq, want, max_relative = 1e-10);
    }
}

#[test]
fn long_term_equilibrium_and_slope() {
    let cfg = NetworkConfig::default_dumbbell();
    let uf = build_update_functions(&cfg).unwrap();
    assert_relative_eq!(uf.long_term_equilibrium().unwrap(), W_BAR, max_relative = 1e-10);
    let v = instability_condition(&cfg).unwrap();
    assert!(v.unstable);
    assert_relative_eq!(v.slope_at_w_bar, SLOPE_AT_W_BAR, max_relative = 1e-3);
    let (a, b) = v.omega.unwrap();
    assert!(a < W_BAR && W_BAR < b);
}

#[test]
fn cycle_and_fairness_bounds() {
    let cfg = NetworkConfig::default_dumbbell();
    let cycle = limit_cycle(&cfg).unwrap();
    assert_eq!(cycle.case, WcapCase::Interior);
    assert_relative_eq!(cycle.w_hat0, W_LT, max_relative = 1e-11);
    assert_relative_eq!(cycle.w_hat1, W_GT, max_relative = 1e-11);

    let fb = fairness_bounds(&cfg).unwrap();
    assert_relative_eq!(fb.worst.phi_max, PHI_MAX, max_relative = 1e-11);
    assert_relative_eq!(fb.worst.phi_min, PHI_MIN, max_relative = 1e-9);
    assert_relative_eq!(fb.non_pessimal.big_w_hat0, BIG_W_HAT0, max_relative = 1e-10);
    assert_relative_eq!(fb.non_pessimal.big_w_hat1, BIG_W_HAT1, max_relative = 1e-10);
    assert_relative_eq!(fb.non_pessimal.phi_np_max, PHI_NP_MAX, max_relative = 1e-10);
    assert_relative_eq!(fb.non_pessimal.phi_np_min, PHI_NP_MIN, max_relative = 1e-10);
    assert!(!fb.non_pessimal.w_hat1_unreliable);

    assert_relative_eq!(oracle::share(&cfg, W_LT, W_GT), PHI_MAX, max_relative = 1e-11);
    assert_relative_eq!(oracle::share(&cfg, BIG_W_HAT1, BIG_W_HAT0), PHI_NP_MIN, max_relative = 1e-10);
}
