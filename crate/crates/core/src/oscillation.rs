//! The probe-to-probe window process: iteration of the window map, its
//! limit cycle when the long-term equilibrium is unstable, and the BBR
//! capacity-share bounds that follow from the cycle.

use std::io::Write;

use serde::Serialize;

use crate::config::NetworkConfig;
use crate::dynamics::{relative_spread, simulate, AdaptationPolicy, IntegratorSettings, Simulator};
use crate::equilibrium::{build_update_functions_with, UpdateFunctions};
use crate::error::{Error, Result};
use crate::model::{
    backoff_queue_for, cubic_window, BbrFlowState, CubicFlowState, StrengthRule, SystemState,
};
use crate::stability::instability_condition_with;

/// Probe values compared by the oscillation detector.
pub const DETECTOR_WINDOW: usize = 6;
/// Relative spread above which the τ_min series counts as oscillating.
pub const DETECTOR_THRESHOLD: f64 = 0.02;
/// Relative tolerance of the limit-cycle soundness check.
pub const CYCLE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LongTermMode {
    /// w(t+1) = w̃←(w(t)): CUBIC reaches its short-term equilibrium every interval.
    Idealized,
    /// w(t+1) from integrating one probe interval at frozen strengths.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongTermTrace {
    pub mode: LongTermMode,
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau_min: Vec<f64>,
}

impl LongTermTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "w", "alpha", "tau_min"])?;
        for (i, ((wv, a), t)) in self.w.iter().zip(&self.alpha).zip(&self.tau_min).enumerate() {
            w.write_record([i.to_string(), wv.to_string(), a.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Iterate the window process `n_steps` times from `w_init`.
pub fn iterate_longterm(
    cfg: &NetworkConfig,
    rule: StrengthRule,
    w_init: f64,
    n_steps: usize,
    mode: LongTermMode,
) -> Result<LongTermTrace> {
    if !(w_init > 0.0 && w_init.is_finite()) {
        return Err(Error::Domain(format!("initial window must be > 0, got {w_init}")));
    }
    let uf = build_update_functions_with(cfg, rule)?;
    let mut trace = LongTermTrace { mode, w: vec![w_init], alpha: vec![], tau_min: vec![] };
    let mut w = w_init;
    for _ in 0..n_steps {
        trace.alpha.push(uf.alpha_update(w));
        trace.tau_min.push(uf.tau_min_at(w));
        w = match mode {
            LongTermMode::Idealized => uf.window_update(w)?,
            LongTermMode::Simulated => simulated_update(&uf, w, crate::dynamics::PROBE_PERIOD)?,
        };
        trace.w.push(w);
    }
    trace.alpha.push(uf.alpha_update(w));
    trace.tau_min.push(uf.tau_min_at(w));
    Ok(trace)
}

/// CUBIC window after one probe interval that starts right after a loss
/// at window `w` (w_max = w, s = 0), with the strengths that the probe at
/// `w` produces held fixed.
pub fn simulated_update(uf: &UpdateFunctions, w: f64, interval: f64) -> Result<f64> {
    let cfg = &uf.cfg;
    if cfg.n_bbr != 1 || cfg.n_cubic != 1 {
        return Err(Error::Precondition("the window process is defined for one BBR and one CUBIC flow".into()));
    }
    let (alpha, beta) = uf.strengths_at(w);
    let eq = uf.equilibrium_at(alpha)?;
    let init = SystemState {
        t: 0.0,
        bbr: vec![BbrFlowState { x_btl: eq.x_btl_eq, tau_min: uf.tau_min_at(w), probe_clock: f64::INFINITY }],
        cubic: vec![CubicFlowState { w_max: w, s: 0.0 }],
        queue: backoff_queue_for(w, cfg),
    };
    let settings = IntegratorSettings::for_config(cfg).with_horizon(interval);
    let mut sim = Simulator::frozen(cfg, alpha, beta, settings, init)?;
    sim.run_for(interval)?;
    Ok(sim.state().cubic_windows(cfg).sum())
}

/// Which part of [w0, w1] the plateau values cover; decides the shape of
/// the limit cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WcapCase {
    /// w^< ≤ w0 < w1 ≤ w^>: both cycle points sit on the plateaus.
    Interior,
    /// w0 < w^< < w1 ≤ w^>.
    Lower,
    /// w^< ≤ w0 < w^> < w1.
    Upper,
    /// w0 < w^< and w^> < w1. No cycle statement applies.
    Excluded,
}

pub fn wcap_case(uf: &UpdateFunctions) -> WcapCase {
    let lower_in = uf.w_lt > uf.w0;
    let upper_in = uf.w_gt < uf.w1;
    match (lower_in, upper_in) {
        (false, false) => WcapCase::Interior,
        (true, false) => WcapCase::Lower,
        (false, true) => WcapCase::Upper,
        (true, true) => WcapCase::Excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitCycle {
    pub w_hat0: f64,
    pub w_hat1: f64,
    pub case: WcapCase,
}

/// The 2-cycle {w̃←(w^>), w̃←(w^<)} of an unstable configuration.
pub fn limit_cycle(cfg: &NetworkConfig) -> Result<LimitCycle> {
    limit_cycle_with(cfg, StrengthRule::Bbrv1)
}

pub fn limit_cycle_with(cfg: &NetworkConfig, rule: StrengthRule) -> Result<LimitCycle> {
    let verdict = instability_condition_with(cfg, rule)?;
    if !verdict.unstable {
        return Err(Error::Precondition(format!(
            "long-term equilibrium is stable (slope {:.4} at w̄), there is no limit cycle",
            verdict.slope_at_w_bar
        )));
    }
    let uf = build_update_functions_with(cfg, rule)?;
    let case = wcap_case(&uf);
    let w_hat0 = uf.window_update(uf.w_gt)?;
    let w_hat1 = uf.window_update(uf.w_lt)?;
    let back0 = uf.window_update(w_hat0)?;
    let back1 = uf.window_update(w_hat1)?;
    let close = |a: f64, b: f64| (a - b).abs() <= CYCLE_RTOL * a.abs().max(b.abs());
    if case == WcapCase::Excluded || !close(back0, w_hat1) || !close(back1, w_hat0) {
        return Err(Error::Soundness(format!(
            "no 2-cycle through the plateaus ({case:?}: w0 = {}, w1 = {}, w^< = {}, w^> = {}; \
             w~<-(w_hat0 = {w_hat0}) = {back0}, w~<-(w_hat1 = {w_hat1}) = {back1})",
            uf.w0, uf.w1, uf.w_lt, uf.w_gt
        )));
    }
    Ok(LimitCycle { w_hat0, w_hat1, case })
}

/// Where the strengths paired with a cycle endpoint come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointStrengths {
    /// τ_min measured at the other endpoint, one probe earlier.
    #[default]
    Previous,
    /// τ_min measured at the same window.
    Own,
}

/// BBR share when CUBIC holds window `w` and BBR runs with strengths from
/// the probe at `w_probe`.
fn bbr_share(uf: &UpdateFunctions, w: f64, w_probe: f64) -> f64 {
    let cfg = &uf.cfg;
    let (alpha, beta) = uf.strengths_at(w_probe);
    let xc = w / uf.tau_bar;
    let xb = beta * cfg.chi.max(cfg.capacity - xc / alpha);
    xb / (xb + xc)
}

fn share_pair(uf: &UpdateFunctions, lo: f64, hi: f64, conv: EndpointStrengths) -> (f64, f64) {
    match conv {
        EndpointStrengths::Previous => (bbr_share(uf, lo, hi), bbr_share(uf, hi, lo)),
        EndpointStrengths::Own => (bbr_share(uf, lo, lo), bbr_share(uf, hi, hi)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCaseBounds {
    pub w_hat0: f64,
    pub w_hat1: f64,
    pub phi_max: f64,
    pub phi_min: f64,
    pub wcap_case: WcapCase,
}

pub fn worst_case_bounds(cfg: &NetworkConfig, conv: EndpointStrengths) -> Result<WorstCaseBounds> {
    require_one_on_one(cfg)?;
    let uf = build_update_functions_with(cfg, StrengthRule::Bbrv1)?;
    let cycle = limit_cycle(cfg)?;
    let (phi_max, phi_min) = share_pair(&uf, cycle.w_hat0, cycle.w_hat1, conv);
    Ok(WorstCaseBounds { w_hat0: cycle.w_hat0, w_hat1: cycle.w_hat1, phi_max, phi_min, wcap_case: cycle.case })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonPessimalBounds {
    #[serde(rename = "W_hat0")]
    pub big_w_hat0: f64,
    #[serde(rename = "W_hat1")]
    pub big_w_hat1: f64,
    pub phi_np_max: f64,
    pub phi_np_min: f64,
    /// s̃(α_min) exceeds one probe period, so W(w̄, 10) understates the
    /// largest window actually reached.
    pub w_hat1_unreliable: bool,
}

/// Windows right after a loss at w̄ and one probe period later.
pub fn non_pessimal_bounds(cfg: &NetworkConfig, conv: EndpointStrengths) -> Result<NonPessimalBounds> {
    require_one_on_one(cfg)?;
    let uf = build_update_functions_with(cfg, StrengthRule::Bbrv1)?;
    let w_bar = uf.long_term_equilibrium()?;
    let period = crate::dynamics::PROBE_PERIOD;
    let lo = (1.0 - cfg.cubic_b) * w_bar;
    let hi = cubic_window(w_bar, period, cfg.cubic_b, cfg.cubic_c);
    let (phi_np_max, phi_np_min) = share_pair(&uf, lo, hi, conv);
    let s_slow = uf.equilibrium_at(uf.alpha_min)?.s_eq;
    Ok(NonPessimalBounds {
        big_w_hat0: lo,
        big_w_hat1: hi,
        phi_np_max,
        phi_np_min,
        w_hat1_unreliable: s_slow > period,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FairnessBounds {
    #[serde(flatten)]
    pub worst: WorstCaseBounds,
    #[serde(flatten)]
    pub non_pessimal: NonPessimalBounds,
}

pub fn fairness_bounds(cfg: &NetworkConfig) -> Result<FairnessBounds> {
    let conv = EndpointStrengths::default();
    Ok(FairnessBounds { worst: worst_case_bounds(cfg, conv)?, non_pessimal: non_pessimal_bounds(cfg, conv)? })
}

fn require_one_on_one(cfg: &NetworkConfig) -> Result<()> {
    if cfg.n_bbr == 1 && cfg.n_cubic == 1 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "fairness bounds are defined for one BBR and one CUBIC flow, config has {} and {}",
            cfg.n_bbr, cfg.n_cubic
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OscillationCheck {
    pub tau_min: Vec<f64>,
    /// Relative spread of the last [`DETECTOR_WINDOW`] probe values.
    pub spread: f64,
    pub oscillating: bool,
}

/// Simulate from the default initial state and judge whether the probe
/// τ_min series of the first BBR flow has settled.
pub fn detect_oscillation(
    cfg: &NetworkConfig,
    policy: AdaptationPolicy,
    settings: IntegratorSettings,
    seed: u64,
) -> Result<OscillationCheck> {
    let init = SystemState::initial(cfg, settings.probe_period);
    let trace = simulate(cfg, policy, settings, init, seed)?;
    let tau_min = trace.probe_series(0);
    let spread = relative_spread(&tau_min, DETECTOR_WINDOW).ok_or_else(|| {
        Error::Precondition(format!(
            "need {DETECTOR_WINDOW} probes, horizon {} s gave {}",
            settings.horizon,
            tau_min.len()
        ))
    })?;
    Ok(OscillationCheck { tau_min, spread, oscillating: spread > DETECTOR_THRESHOLD })
}
