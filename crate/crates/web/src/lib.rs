//! Browser bindings for the `www/` demo page.
//!
//! Each export takes plain numbers from the form fields and returns a JSON
//! string for the page to plot. The `*_report` functions do the work and are
//! ordinary Rust, so they can be tested without a JS host.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ccfluid::dynamics::{simulate, AdaptationPolicy, IntegratorSettings};
use ccfluid::equilibrium::build_update_functions_with;
use ccfluid::model::SystemState;
use ccfluid::oscillation::{iterate_longterm, LongTermMode};
use ccfluid::stability::{instability_condition_with, sweep, SweepAxis, SweepParam};
use ccfluid::NetworkConfig;

/// Bottleneck delay as a share of the path delay, as in the default setup.
const BTL_FRACTION: f64 = 0.25;
const MAX_HORIZON: f64 = 300.0;
const MAX_SWEEP_STEPS: usize = 40;

fn config(mbps: f64, rtt_ms: f64, buffer_bdp: f64) -> Result<NetworkConfig, String> {
    let cfg = NetworkConfig::from_mbps(mbps, rtt_ms / 1e3, BTL_FRACTION, buffer_bdp);
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn policy(name: &str, theta: f64) -> Result<AdaptationPolicy, String> {
    let p = match name {
        "vanilla" => AdaptationPolicy::Vanilla,
        "smoothed" => AdaptationPolicy::Smoothed { theta },
        "randomized" => AdaptationPolicy::Randomized { seed: 1 },
        "bbrv2" => AdaptationPolicy::Bbrv2,
        other => return Err(format!("unknown policy {other:?}")),
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

#[derive(Serialize)]
struct TraceReport {
    t: Vec<f64>,
    phi_bbr: Vec<f64>,
    queue: Vec<f64>,
    probe_t: Vec<f64>,
    probe_tau_min: Vec<f64>,
}

pub fn simulate_report(
    mbps: f64,
    rtt_ms: f64,
    buffer_bdp: f64,
    policy_name: &str,
    theta: f64,
    horizon: f64,
) -> Result<String, String> {
    let cfg = config(mbps, rtt_ms, buffer_bdp)?;
    let pol = policy(policy_name, theta)?;
    if !(horizon > 0.0 && horizon <= MAX_HORIZON) {
        return Err(format!("horizon must lie in (0, {MAX_HORIZON}] s"));
    }
    let settings = IntegratorSettings::for_config(&cfg).with_horizon(horizon);
    let init = SystemState::initial(&cfg, settings.probe_period);
    let trace = simulate(&cfg, pol, settings, init, 1).map_err(|e| e.to_string())?;
    let report = TraceReport {
        t: trace.samples.iter().map(|s| s.t).collect(),
        phi_bbr: trace.samples.iter().map(|s| s.phi_bbr).collect(),
        queue: trace.samples.iter().map(|s| s.queue).collect(),
        probe_t: trace.probe_times(0),
        probe_tau_min: trace.probe_series(0),
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MapReport {
    w: Vec<f64>,
    w_next: Vec<f64>,
    w_bar: f64,
    unstable: bool,
    slope_at_w_bar: f64,
    iterates: Vec<f64>,
}

/// The probe-to-probe window map on [0, 1.2·w^>], plus its iteration from `w_start`.
pub fn update_map_report(
    mbps: f64,
    rtt_ms: f64,
    buffer_bdp: f64,
    w_start: f64,
    points: usize,
) -> Result<String, String> {
    let cfg = config(mbps, rtt_ms, buffer_bdp)?;
    let rule = AdaptationPolicy::Vanilla.strength_rule();
    let uf = build_update_functions_with(&cfg, rule).map_err(|e| e.to_string())?;
    let points = points.clamp(2, 4000);
    let top = 1.2 * uf.w_gt;
    let w: Vec<f64> = (1..=points).map(|i| top * i as f64 / points as f64).collect();
    let w_next = w.iter().map(|&x| uf.window_update(x)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let verdict = instability_condition_with(&cfg, rule).map_err(|e| e.to_string())?;
    let iterates = iterate_longterm(&cfg, rule, w_start, 20, LongTermMode::Idealized).map_err(|e| e.to_string())?.w;
    let report = MapReport {
        w,
        w_next,
        w_bar: verdict.w_bar.unwrap_or(f64::NAN),
        unstable: verdict.unstable,
        slope_at_w_bar: verdict.slope_at_w_bar,
        iterates,
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SweepReport {
    mbps: Vec<f64>,
    buffer_bdp: Vec<f64>,
    /// Row per capacity value, column per buffer value.
    unstable: Vec<Vec<bool>>,
}

/// Capacity (1 to 200 Mbps) by buffer (0.1 to 3 BDP) verdict grid.
pub fn sweep_report(rtt_ms: f64, policy_name: &str, steps: usize) -> Result<String, String> {
    let base = config(100.0, rtt_ms, 1.5)?;
    let rule = policy(policy_name, 1.0)?.strength_rule();
    let steps = steps.clamp(2, MAX_SWEEP_STEPS);
    let x = SweepAxis::new(SweepParam::Capacity, 1.0, 200.0, steps).map_err(|e| e.to_string())?;
    let y = SweepAxis::new(SweepParam::BufferBdpMultiple, 0.1, 3.0, steps).map_err(|e| e.to_string())?;
    let grid = sweep(&base, x, y, rule).map_err(|e| e.to_string())?;
    let unstable = (0..steps).map(|ix| (0..steps).map(|iy| grid.cell(ix, iy).unstable()).collect()).collect();
    serde_json::to_string(&SweepReport { mbps: x.values(), buffer_bdp: y.values(), unstable })
        .map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn run_simulation(
    mbps: f64,
    rtt_ms: f64,
    buffer_bdp: f64,
    policy: &str,
    theta: f64,
    horizon: f64,
) -> Result<String, JsError> {
    js(simulate_report(mbps, rtt_ms, buffer_bdp, policy, theta, horizon))
}

#[wasm_bindgen]
pub fn update_map(mbps: f64, rtt_ms: f64, buffer_bdp: f64, w_start: f64, points: usize) -> Result<String, JsError> {
    js(update_map_report(mbps, rtt_ms, buffer_bdp, w_start, points))
}

#[wasm_bindgen]
pub fn stability_grid(rtt_ms: f64, policy: &str, steps: usize) -> Result<String, JsError> {
    js(sweep_report(rtt_ms, policy, steps))
}
