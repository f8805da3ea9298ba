//! State types and the pure right-hand-side pieces of the fluid model:
//! CUBIC window growth, BBR strengths, link load, loss and the back-off queue.

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};

/// Segments left in flight per BBR flow while it probes for the minimum RTT.
pub const PROBE_INFLIGHT: f64 = 4.0;

/// Relative slack on the queue-full test, `buffer * QUEUE_FULL_TOL`.
pub const QUEUE_FULL_TOL: f64 = 1e-6;

/// CUBIC window after `s` seconds of growth since the last loss.
///
/// W(w_max, s) = w_max + c (s - cbrt(b w_max / c))^3
pub fn window_growth(w_max: f64, s: f64, cfg: &NetworkConfig) -> Result<f64> {
    if !(w_max > 0.0) {
        return Err(Error::Domain(format!("window_growth needs w_max > 0, got {w_max}")));
    }
    Ok(cubic_window(w_max, s, cfg.cubic_b, cfg.cubic_c))
}

/// Unchecked form of [`window_growth`] for the integrator's inner loop.
#[inline]
pub fn cubic_window(w_max: f64, s: f64, b: f64, c: f64) -> f64 {
    let d = s - (b * w_max / c).cbrt();
    w_max + c * d * d * d
}

/// Growth duration at which the window is back at `w_max`.
#[inline]
pub fn cubic_plateau_time(w_max: f64, cfg: &NetworkConfig) -> f64 {
    (cfg.cubic_b * w_max / cfg.cubic_c).cbrt()
}

/// How a BBR variant turns its delay ratio into the probing strength α and
/// the steady strength β.
///
/// All variants share the shape α = min(a_cap, a_coef·r), β = min(1, b_coef·r)
/// with r = τ_min/τ, which is what lets the integrator treat the two `min`
/// kinks as ordinary switching surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum StrengthRule {
    /// α = min(5/4, 2τmin/τ), β = min(1, 2τmin/τ)
    Bbrv1,
    /// α = 5/4·min(1, τmin/τ), β = min(1, τmin/τ)
    Bbrv2,
    /// BBRv2 with α scaled by `gain`.
    Bbrv3 { gain: f64 },
}

impl StrengthRule {
    pub fn a_coef(&self) -> f64 {
        match *self {
            StrengthRule::Bbrv1 => 2.0,
            StrengthRule::Bbrv2 => 1.25,
            StrengthRule::Bbrv3 { gain } => 1.25 * gain,
        }
    }

    pub fn a_cap(&self) -> f64 {
        match *self {
            StrengthRule::Bbrv1 | StrengthRule::Bbrv2 => 1.25,
            StrengthRule::Bbrv3 { gain } => 1.25 * gain,
        }
    }

    pub fn b_coef(&self) -> f64 {
        match *self {
            StrengthRule::Bbrv1 => 2.0,
            StrengthRule::Bbrv2 | StrengthRule::Bbrv3 { .. } => 1.0,
        }
    }

    /// Ratio at which α stops growing.
    pub fn alpha_knee(&self) -> f64 {
        self.a_cap() / self.a_coef()
    }

    /// Ratio at which β stops growing.
    pub fn beta_knee(&self) -> f64 {
        1.0 / self.b_coef()
    }

    pub fn strengths(&self, tau_min: f64, tau: f64) -> Result<(f64, f64)> {
        if !(tau_min > 0.0 && tau > 0.0) {
            return Err(Error::Domain(format!(
                "strengths need positive delays, got tau_min = {tau_min}, tau = {tau}"
            )));
        }
        Ok(self.strengths_at_ratio(tau_min / tau))
    }

    #[inline]
    pub fn strengths_at_ratio(&self, r: f64) -> (f64, f64) {
        ((self.a_coef() * r).min(self.a_cap()), (self.b_coef() * r).min(1.0))
    }

    /// Strengths with the two `min` branches chosen by the caller.
    #[inline]
    pub fn strengths_in_region(&self, r: f64, alpha_capped: bool, beta_capped: bool) -> (f64, f64) {
        let a = if alpha_capped { self.a_cap() } else { self.a_coef() * r };
        let b = if beta_capped { 1.0 } else { self.b_coef() * r };
        (a, b)
    }

    /// β that accompanies a given α under this rule. At the cap, r is
    /// ambiguous but β is not (it is already 1 for every variant).
    pub fn beta_for_alpha(&self, alpha: f64) -> f64 {
        (self.b_coef() * alpha / self.a_coef()).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let StrengthRule::Bbrv3 { gain } = *self {
            if !(gain.is_finite() && gain >= 1.0) {
                return Err(Error::Config(format!("bbrv3 gain must be >= 1, got {gain}")));
            }
        }
        Ok(())
    }
}

/// α = min(5/4, 2τmin/τ), β = min(1, 2τmin/τ).
pub fn bbr_strengths(tau_min: f64, tau: f64) -> Result<(f64, f64)> {
    StrengthRule::Bbrv1.strengths(tau_min, tau)
}

/// α' = 5/4·min(1, τmin/τ), β' = min(1, τmin/τ).
pub fn bbrv2_strengths(tau_min: f64, tau: f64) -> Result<(f64, f64)> {
    StrengthRule::Bbrv2.strengths(tau_min, tau)
}

/// Where the strengths come from during integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strengths {
    Rule(StrengthRule),
    /// Frozen (α, β), used to integrate a single short-term interval.
    Fixed { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbrFlowState {
    pub x_btl: f64,
    pub tau_min: f64,
    /// Seconds until this flow's next RTT probe.
    pub probe_clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicFlowState {
    pub w_max: f64,
    pub s: f64,
}

impl CubicFlowState {
    pub fn window(&self, cfg: &NetworkConfig) -> f64 {
        cubic_window(self.w_max, self.s, cfg.cubic_b, cfg.cubic_c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub t: f64,
    pub bbr: Vec<BbrFlowState>,
    pub cubic: Vec<CubicFlowState>,
    pub queue: f64,
}

impl SystemState {
    /// Start-up state: equal rate split, minimum RTT at the propagation
    /// delay, empty queue, CUBIC just after a loss.
    pub fn initial(cfg: &NetworkConfig, probe_period: f64) -> Self {
        let n = (cfg.n_bbr + cfg.n_cubic) as f64;
        SystemState {
            t: 0.0,
            bbr: vec![
                BbrFlowState {
                    x_btl: (cfg.capacity / n).max(cfg.chi),
                    tau_min: cfg.path_prop_delay,
                    probe_clock: probe_period,
                };
                cfg.n_bbr
            ],
            cubic: vec![CubicFlowState { w_max: cfg.path_prop_delay * cfg.capacity / n, s: 0.0 }; cfg.n_cubic],
            queue: 0.0,
        }
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.bbr.len() != cfg.n_bbr || self.cubic.len() != cfg.n_cubic {
            return Err(Error::Domain(format!(
                "state has {} BBR / {} CUBIC flows, config expects {} / {}",
                self.bbr.len(),
                self.cubic.len(),
                cfg.n_bbr,
                cfg.n_cubic
            )));
        }
        if !(self.queue >= 0.0 && self.queue <= cfg.buffer * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("queue {} outside [0, {}]", self.queue, cfg.buffer)));
        }
        for f in &self.bbr {
            if !(f.x_btl > 0.0 && f.tau_min > 0.0) {
                return Err(Error::Domain(format!("invalid BBR state {f:?}")));
            }
        }
        for f in &self.cubic {
            if !(f.w_max > 0.0 && f.s >= 0.0) {
                return Err(Error::Domain(format!("invalid CUBIC state {f:?}")));
            }
        }
        Ok(())
    }

    pub fn cubic_windows<'a>(&'a self, cfg: &'a NetworkConfig) -> impl Iterator<Item = f64> + 'a {
        self.cubic.iter().map(move |f| f.window(cfg))
    }

    pub fn is_finite(&self) -> bool {
        self.queue.is_finite()
            && self.bbr.iter().all(|f| f.x_btl.is_finite() && f.tau_min.is_finite())
            && self.cubic.iter().all(|f| f.w_max.is_finite() && f.s.is_finite())
    }
}

/// Instantaneous rates derived from a state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rates {
    pub x_bbr: Vec<f64>,
    pub x_cubic: Vec<f64>,
    pub windows: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Current RTT of every flow (they share the propagation delay).
    pub tau: f64,
    pub y: f64,
    pub loss: f64,
}

impl Rates {
    pub fn bbr_total(&self) -> f64 {
        self.x_bbr.iter().sum()
    }
    pub fn cubic_total(&self) -> f64 {
        self.x_cubic.iter().sum()
    }
    /// BBR share of the aggregate sending rate.
    pub fn phi_bbr(&self) -> f64 {
        let b = self.bbr_total();
        let total = b + self.cubic_total();
        if total > 0.0 {
            b / total
        } else {
            0.0
        }
    }
}

/// Current per-flow delay, τ = τᵖ + q/C.
#[inline]
pub fn current_delay(queue: f64, cfg: &NetworkConfig) -> f64 {
    cfg.path_prop_delay + queue / cfg.capacity
}

/// Rates, load and loss for a state.
pub fn total_load(state: &SystemState, cfg: &NetworkConfig, strengths: Strengths) -> Result<Rates> {
    let tau = current_delay(state.queue, cfg);
    let mut alpha = Vec::with_capacity(state.bbr.len());
    let mut beta = Vec::with_capacity(state.bbr.len());
    let mut x_bbr = Vec::with_capacity(state.bbr.len());
    for f in &state.bbr {
        let (a, b) = match strengths {
            Strengths::Rule(rule) => rule.strengths(f.tau_min, tau)?,
            Strengths::Fixed { alpha, beta } => (alpha, beta),
        };
        alpha.push(a);
        beta.push(b);
        x_bbr.push(b * f.x_btl);
    }
    let windows: Vec<f64> = state.cubic_windows(cfg).collect();
    let x_cubic: Vec<f64> = windows.iter().map(|w| w / tau).collect();
    let y = x_bbr.iter().sum::<f64>() + x_cubic.iter().sum::<f64>();
    let loss = loss_rate(y, state.queue, cfg);
    Ok(Rates { x_bbr, x_cubic, windows, alpha, beta, tau, y, loss })
}

/// Loss only happens on a full buffer with excess load: p = (y - C)/y.
pub fn loss_rate(y: f64, queue: f64, cfg: &NetworkConfig) -> f64 {
    if y > cfg.capacity && queue >= cfg.buffer * (1.0 - QUEUE_FULL_TOL) {
        (y - cfg.capacity) / y
    } else {
        0.0
    }
}

/// Queue that survives an RTT probe: every BBR flow drops to 4 segments in
/// flight, every CUBIC flow is assumed to have backed off by (1 - b), and the
/// bottleneck link itself holds τᵖ_ℓ·C of it.
pub fn backoff_queue(state: &SystemState, cfg: &NetworkConfig) -> f64 {
    backoff_queue_for(state.cubic_windows(cfg).sum(), cfg)
}

/// [`backoff_queue`] given the summed CUBIC window.
pub fn backoff_queue_for(sum_w: f64, cfg: &NetworkConfig) -> f64 {
    let q = PROBE_INFLIGHT * cfg.n_bbr as f64 + (1.0 - cfg.cubic_b) * sum_w
        - cfg.btl_prop_delay * cfg.capacity;
    q.clamp(0.0, cfg.buffer)
}
