//! Time integration of the fluid model between RTT probes, and the probe
//! updates themselves.
//!
//! The right-hand side is only piecewise smooth: loss switches on when the
//! queue hits the buffer, the queue sticks at 0 or B, the delivery rate and
//! both strengths have `min`/case kinks, and the bandwidth estimate sits on a
//! floor. A plain fixed-step RK4 drops to first order at every such switch,
//! so the integrator tracks which smooth piece it is on (a [`Mode`]), keeps
//! that piece frozen across the RK stages, and bisects each step for the
//! first guard that changes sign. The public grid stays fixed at `dt`.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::{
    backoff_queue, cubic_window, current_delay, total_load, StrengthRule, Strengths, SystemState,
};

/// Default seconds between RTT probes.
pub const PROBE_PERIOD: f64 = 10.0;
/// Default history length of the detect-and-freeze policy.
pub const FREEZE_HISTORY: usize = 5;
/// Default relative-deviation threshold of the detect-and-freeze policy.
pub const FREEZE_KAPPA: f64 = 0.1;
/// Default α multiplier for the BBRv3 variant.
pub const BBRV3_GAIN: f64 = 1.25;

const MAX_EVENTS_PER_STEP: usize = 64;
const GUARD_RTOL: f64 = 1e-12;
/// Local error target of one sub-step, in the weighted max-norm.
const STEP_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    pub dt: f64,
    pub probe_period: f64,
    pub horizon: f64,
    /// Record every `decimation`-th grid point.
    pub decimation: usize,
}

impl IntegratorSettings {
    /// dt = min(1 ms, τᵖ/40), 10 s probes, 120 s horizon, 100 ms samples.
    pub fn for_config(cfg: &NetworkConfig) -> Self {
        let dt = (1e-3f64).min(cfg.path_prop_delay / 40.0);
        IntegratorSettings {
            dt,
            probe_period: PROBE_PERIOD,
            horizon: 120.0,
            decimation: ((0.1 / dt).round() as usize).max(1),
        }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= cfg.path_prop_delay / 10.0 * (1.0 + 1e-12)) {
            return Err(Error::Config(format!(
                "dt must lie in (0, path_prop_delay/10 = {}], got {}",
                cfg.path_prop_delay / 10.0,
                self.dt
            )));
        }
        if !(self.probe_period > 0.0 && self.probe_period.is_finite()) {
            return Err(Error::Config(format!("probe_period must be > 0, got {}", self.probe_period)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if self.decimation == 0 {
            return Err(Error::Config("decimation must be >= 1".into()));
        }
        Ok(())
    }

    fn steps(&self, span: f64) -> usize {
        (span / self.dt).round() as usize
    }
}

/// How an RTT probe updates the minimum-RTT estimate, and which strength
/// rule applies between probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum AdaptationPolicy {
    Vanilla,
    /// τ_min ← θ·measured + (1−θ)·τ_min
    Smoothed { theta: f64 },
    /// Independent per-flow probe times drawn from U[0.5, 1.5]·period.
    Randomized { seed: u64 },
    /// Freeze τ_min at the history mean when the history spread exceeds κ.
    DetectFreeze { kappa: f64, history_len: usize },
    Bbrv2,
    Bbrv3 { gain: f64 },
}

impl AdaptationPolicy {
    pub fn strength_rule(&self) -> StrengthRule {
        match *self {
            AdaptationPolicy::Bbrv2 => StrengthRule::Bbrv2,
            AdaptationPolicy::Bbrv3 { gain } => StrengthRule::Bbrv3 { gain },
            _ => StrengthRule::Bbrv1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdaptationPolicy::Vanilla => "vanilla",
            AdaptationPolicy::Smoothed { .. } => "smoothed",
            AdaptationPolicy::Randomized { .. } => "randomized",
            AdaptationPolicy::DetectFreeze { .. } => "detect-freeze",
            AdaptationPolicy::Bbrv2 => "bbrv2",
            AdaptationPolicy::Bbrv3 { .. } => "bbrv3",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AdaptationPolicy::Smoothed { theta } if !(theta > 0.0 && theta <= 1.0) => {
                Err(Error::Config(format!("theta must lie in (0, 1], got {theta}")))
            }
            AdaptationPolicy::DetectFreeze { kappa, history_len } => {
                if !(kappa > 0.0 && kappa.is_finite()) {
                    Err(Error::Config(format!("kappa must be > 0, got {kappa}")))
                } else if history_len < 2 {
                    Err(Error::Config(format!("history length must be >= 2, got {history_len}")))
                } else {
                    Ok(())
                }
            }
            AdaptationPolicy::Bbrv3 { gain } => StrengthRule::Bbrv3 { gain }.validate(),
            _ => Ok(()),
        }
    }
}

/// Time derivative of the continuous state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub x_btl: Vec<f64>,
    pub w_max: Vec<f64>,
    pub s: Vec<f64>,
    pub queue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueueMode {
    Filling,
    Full,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FlowMode {
    congested: bool,
    pinned: bool,
    alpha_capped: bool,
    beta_capped: bool,
}

/// Which smooth piece of the right-hand side is active.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Mode {
    queue: QueueMode,
    bbr: Vec<FlowMode>,
}

/// The ODE between probes: configuration plus the frozen τ_min values.
struct Ode<'a> {
    cfg: &'a NetworkConfig,
    strengths: Strengths,
    tau_min: Vec<f64>,
    nb: usize,
    nc: usize,
}

/// Quantities shared by the right-hand side, the guards and the classifier.
struct Eval {
    tau: f64,
    y: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    windows: Vec<f64>,
}

impl<'a> Ode<'a> {
    fn new(cfg: &'a NetworkConfig, strengths: Strengths, state: &SystemState) -> Self {
        Ode {
            cfg,
            strengths,
            tau_min: state.bbr.iter().map(|f| f.tau_min).collect(),
            nb: state.bbr.len(),
            nc: state.cubic.len(),
        }
    }

    fn dim(&self) -> usize {
        self.nb + 2 * self.nc + 1
    }

    fn pack(&self, state: &SystemState) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(state.bbr.iter().map(|f| f.x_btl));
        v.extend(state.cubic.iter().map(|f| f.w_max));
        v.extend(state.cubic.iter().map(|f| f.s));
        v.push(state.queue);
        v
    }

    fn unpack(&self, v: &[f64], state: &mut SystemState) {
        for (i, f) in state.bbr.iter_mut().enumerate() {
            f.x_btl = v[i];
        }
        for (k, f) in state.cubic.iter_mut().enumerate() {
            f.w_max = v[self.nb + k];
            f.s = v[self.nb + self.nc + k];
        }
        state.queue = v[self.dim() - 1];
    }

    fn q(&self, v: &[f64]) -> f64 {
        v[self.dim() - 1]
    }

    /// Strengths either from the frozen branch choice or, with `mode = None`,
    /// from the actual `min` expressions.
    fn eval(&self, v: &[f64], mode: Option<&Mode>) -> Eval {
        let cfg = self.cfg;
        let tau = current_delay(self.q(v), cfg);
        let mut alpha = Vec::with_capacity(self.nb);
        let mut beta = Vec::with_capacity(self.nb);
        for i in 0..self.nb {
            let (a, b) = match self.strengths {
                Strengths::Fixed { alpha, beta } => (alpha, beta),
                Strengths::Rule(rule) => {
                    let r = self.tau_min[i] / tau;
                    match mode {
                        Some(m) => rule.strengths_in_region(r, m.bbr[i].alpha_capped, m.bbr[i].beta_capped),
                        None => rule.strengths_at_ratio(r),
                    }
                }
            };
            alpha.push(a);
            beta.push(b);
        }
        let windows: Vec<f64> = (0..self.nc)
            .map(|k| cubic_window(v[self.nb + k], v[self.nb + self.nc + k], cfg.cubic_b, cfg.cubic_c))
            .collect();
        let y = (0..self.nb).map(|i| beta[i] * v[i]).sum::<f64>() + windows.iter().sum::<f64>() / tau;
        Eval { tau, y, alpha, beta, windows }
    }

    fn rhs(&self, v: &[f64], mode: &Mode, out: &mut [f64]) {
        let cfg = self.cfg;
        let e = self.eval(v, Some(mode));
        let cap = cfg.capacity;
        let p = match mode.queue {
            QueueMode::Full => (e.y - cap) / e.y,
            _ => 0.0,
        };
        for i in 0..self.nb {
            let x = v[i];
            let fm = mode.bbr[i];
            out[i] = if fm.pinned {
                0.0
            } else {
                let a = e.alpha[i];
                let x_dlv = if fm.congested { a * x * cap / (e.y + (a - e.beta[i]) * x) } else { a * x };
                x_dlv - x
            };
        }
        for k in 0..self.nc {
            let w_max = v[self.nb + k];
            let s = v[self.nb + self.nc + k];
            let w = e.windows[k];
            let xc = w / e.tau;
            out[self.nb + k] = (w - w_max) * xc * p;
            out[self.nb + self.nc + k] = 1.0 - s * xc * p;
        }
        out[self.dim() - 1] = match mode.queue {
            QueueMode::Filling => e.y - cap,
            _ => 0.0,
        };
    }

    /// Delivery rate of flow `i` at its current estimate, real branches.
    fn delivery(&self, v: &[f64], e: &Eval, i: usize) -> f64 {
        let a = e.alpha[i];
        let x = v[i];
        let d = e.y + (a - e.beta[i]) * x;
        if d >= self.cfg.capacity {
            a * x * self.cfg.capacity / d
        } else {
            a * x
        }
    }

    /// Mode of a state, breaking ties at boundaries by the direction the
    /// flow would move.
    fn classify(&self, v: &mut [f64]) -> Mode {
        let cfg = self.cfg;
        let qi = self.dim() - 1;
        let tol = 1e-9 * cfg.buffer;
        if v[qi] >= cfg.buffer - tol {
            v[qi] = cfg.buffer;
        } else if v[qi] <= tol {
            v[qi] = 0.0;
        }
        for i in 0..self.nb {
            if v[i] < cfg.chi * (1.0 + 1e-12) {
                v[i] = cfg.chi;
            }
        }
        let e = self.eval(v, None);
        let queue = if v[qi] == cfg.buffer && e.y > cfg.capacity {
            QueueMode::Full
        } else if v[qi] == 0.0 && e.y < cfg.capacity {
            QueueMode::Empty
        } else {
            QueueMode::Filling
        };
        let mut bbr = Vec::with_capacity(self.nb);
        for i in 0..self.nb {
            let d = e.y + (e.alpha[i] - e.beta[i]) * v[i];
            let (alpha_capped, beta_capped) = match self.strengths {
                Strengths::Fixed { .. } => (false, false),
                Strengths::Rule(rule) => {
                    let r = self.tau_min[i] / e.tau;
                    (r >= rule.alpha_knee(), r >= rule.beta_knee())
                }
            };
            let pinned = v[i] == cfg.chi && self.delivery(v, &e, i) <= cfg.chi;
            bbr.push(FlowMode { congested: d >= cfg.capacity, pinned, alpha_capped, beta_capped });
        }
        Mode { queue, bbr }
    }

    /// True when some guard of `mode` has gone negative at `v`.
    fn violated(&self, v: &[f64], mode: &Mode) -> bool {
        let cfg = self.cfg;
        let cap = cfg.capacity;
        let e = self.eval(v, Some(mode));
        let q = self.q(v);
        let qtol = GUARD_RTOL * cfg.buffer;
        let rtol = GUARD_RTOL * cap;
        let queue_bad = match mode.queue {
            QueueMode::Filling => q > cfg.buffer + qtol || q < -qtol,
            QueueMode::Full => e.y - cap < -rtol,
            QueueMode::Empty => cap - e.y < -rtol,
        };
        if queue_bad {
            return true;
        }
        for i in 0..self.nb {
            let fm = mode.bbr[i];
            let x = v[i];
            let a = e.alpha[i];
            let d = e.y + (a - e.beta[i]) * x;
            if fm.congested && d - cap < -rtol || !fm.congested && cap - d < -rtol {
                return true;
            }
            if fm.pinned {
                let x_dlv = if fm.congested { a * x * cap / d } else { a * x };
                if x_dlv - cfg.chi > rtol {
                    return true;
                }
            } else if x - cfg.chi < -rtol {
                return true;
            }
            if let Strengths::Rule(rule) = self.strengths {
                let r = self.tau_min[i] / e.tau;
                let ka = r - rule.alpha_knee();
                let kb = r - rule.beta_knee();
                if fm.alpha_capped && ka < -GUARD_RTOL || !fm.alpha_capped && ka > GUARD_RTOL {
                    return true;
                }
                if fm.beta_capped && kb < -GUARD_RTOL || !fm.beta_capped && kb > GUARD_RTOL {
                    return true;
                }
            }
        }
        false
    }

    fn rk4(&self, v: &[f64], mode: &Mode, h: f64, scratch: &mut Rk4Scratch) -> Vec<f64> {
        let n = v.len();
        let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
        self.rhs(v, mode, k1);
        for j in 0..n {
            tmp[j] = v[j] + 0.5 * h * k1[j];
        }
        self.rhs(tmp, mode, k2);
        for j in 0..n {
            tmp[j] = v[j] + 0.5 * h * k2[j];
        }
        self.rhs(tmp, mode, k3);
        for j in 0..n {
            tmp[j] = v[j] + h * k3[j];
        }
        self.rhs(tmp, mode, k4);
        (0..n).map(|j| v[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])).collect()
    }

    /// Weighted max-norm of the difference of two states.
    fn error_norm(&self, a: &[f64], b: &[f64]) -> f64 {
        let cfg = self.cfg;
        let mut err = 0.0f64;
        for (j, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = if j < self.nb {
                cfg.capacity
            } else if j < self.nb + self.nc {
                cfg.bdp().max(x.abs())
            } else if j < self.nb + 2 * self.nc {
                1.0f64.max(x.abs())
            } else {
                cfg.buffer
            };
            let d = (x - y).abs() / scale;
            // f64::max would drop a NaN here and accept a blown-up trial step
            if !d.is_finite() {
                return f64::INFINITY;
            }
            err = err.max(d);
        }
        err
    }

    /// Advance `v` by `h`, stopping at every mode switch inside the step.
    ///
    /// Sub-steps are sized by step doubling. Right after a loss the CUBIC
    /// response can be stiff enough that a full grid step of RK4 is unstable;
    /// `hint` carries the accepted sub-step size from one call to the next.
    fn advance(&self, v: &mut Vec<f64>, mode: &mut Mode, h: f64, hint: &mut f64, scratch: &mut Rk4Scratch) {
        let mut done = 0.0;
        let mut events = 0;
        let h_min = h * 1e-9;
        while h - done > 1e-12 * h {
            let sub = hint.min(h - done).max(h_min.min(h - done));
            let full = self.rk4(v, mode, sub, scratch);
            let mid = self.rk4(v, mode, 0.5 * sub, scratch);
            let two = self.rk4(&mid, mode, 0.5 * sub, scratch);
            let err = self.error_norm(&full, &two);
            let grow = if err > 0.0 { (0.9 * (STEP_TOL / err).powf(0.2)).clamp(0.2, 4.0) } else { 4.0 };
            if err > STEP_TOL && sub > h_min || !err.is_finite() && sub > h_min {
                *hint = sub * grow.min(0.5);
                continue;
            }
            if events < MAX_EVENTS_PER_STEP && self.violated(&two, mode) {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                let mut past = two;
                while (hi - lo) * sub > 1e-15 * h && hi - lo > f64::EPSILON {
                    let m = 0.5 * (lo + hi);
                    let cand = self.rk4(v, mode, m * sub, scratch);
                    if self.violated(&cand, mode) {
                        hi = m;
                        past = cand;
                    } else {
                        lo = m;
                    }
                }
                *v = past;
                *mode = self.classify(v);
                done += hi * sub;
                events += 1;
                continue;
            }
            *v = two;
            *mode = self.classify(v);
            done += sub;
            *hint = (sub * grow).min(h);
        }
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize) -> Self {
        Rk4Scratch { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }
}

/// Right-hand side at a state, with the piece chosen from the state itself.
pub fn derivative(state: &SystemState, cfg: &NetworkConfig, strengths: Strengths) -> StateDerivative {
    let ode = Ode::new(cfg, strengths, state);
    let mut v = ode.pack(state);
    let mode = ode.classify(&mut v);
    let mut out = vec![0.0; ode.dim()];
    ode.rhs(&v, &mode, &mut out);
    let (nb, nc) = (ode.nb, ode.nc);
    StateDerivative {
        x_btl: out[..nb].to_vec(),
        w_max: out[nb..nb + nc].to_vec(),
        s: out[nb + nc..nb + 2 * nc].to_vec(),
        queue: out[ode.dim() - 1],
    }
}

/// One integration step of length `dt`, without probing. Probe clocks count down.
pub fn step(state: &SystemState, cfg: &NetworkConfig, strengths: Strengths, dt: f64) -> Result<SystemState> {
    let ode = Ode::new(cfg, strengths, state);
    let mut v = ode.pack(state);
    let mut mode = ode.classify(&mut v);
    let mut scratch = Rk4Scratch::new(ode.dim());
    let mut hint = dt;
    ode.advance(&mut v, &mut mode, dt, &mut hint, &mut scratch);
    let mut next = state.clone();
    ode.unpack(&v, &mut next);
    next.t = state.t + dt;
    for f in &mut next.bbr {
        f.probe_clock -= dt;
    }
    if !next.is_finite() {
        return Err(Error::NonFinite { t: next.t, what: format!("{next:?}") });
    }
    Ok(next)
}

/// Mutable per-run bookkeeping that probe updates depend on.
#[derive(Debug, Clone)]
pub struct ProbeContext {
    rng: ChaCha8Rng,
    history: Vec<VecDeque<f64>>,
}

impl ProbeContext {
    pub fn new(n_bbr: usize, seed: u64) -> Self {
        ProbeContext { rng: ChaCha8Rng::seed_from_u64(seed), history: vec![VecDeque::new(); n_bbr] }
    }

    fn draw_period(&mut self, period: f64) -> f64 {
        period * self.rng.gen_range(0.5..1.5)
    }
}

/// Record of one RTT probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeEvent {
    pub t: f64,
    pub flow: usize,
    /// Minimum RTT actually seen during the probe.
    pub measured: f64,
    /// Estimate adopted afterwards.
    pub tau_min: f64,
    pub queue_after: f64,
}

/// RTT probe of the BBR flows in `flows`.
///
/// The queue drains to the back-off level q⁻ (never upward), the flows see
/// τᵖ + q/C as their minimum RTT, and the policy turns that measurement into
/// the new estimate. Probe clocks of the probing flows are re-armed.
pub fn probe_step(
    state: &SystemState,
    cfg: &NetworkConfig,
    policy: &AdaptationPolicy,
    flows: &[usize],
    period: f64,
    ctx: &mut ProbeContext,
) -> (SystemState, Vec<ProbeEvent>) {
    let mut next = state.clone();
    let q = backoff_queue(state, cfg).min(state.queue);
    let measured = cfg.path_prop_delay + q / cfg.capacity;
    next.queue = q;
    let mut events = Vec::with_capacity(flows.len());
    for &i in flows {
        let old = state.bbr[i].tau_min;
        let tau_min = match *policy {
            AdaptationPolicy::Smoothed { theta } => theta * measured + (1.0 - theta) * old,
            AdaptationPolicy::DetectFreeze { kappa, history_len } => {
                let h = &mut ctx.history[i];
                h.push_back(measured);
                while h.len() > history_len {
                    h.pop_front();
                }
                if h.len() >= 2 {
                    let n = h.len() as f64;
                    let mean = h.iter().sum::<f64>() / n;
                    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    if var.sqrt() > kappa * mean {
                        mean
                    } else {
                        measured
                    }
                } else {
                    measured
                }
            }
            _ => measured,
        }
        .max(cfg.path_prop_delay);
        next.bbr[i].tau_min = tau_min;
        next.bbr[i].probe_clock = match policy {
            AdaptationPolicy::Randomized { .. } => ctx.draw_period(period),
            _ => period,
        };
        events.push(ProbeEvent { t: state.t, flow: i, measured, tau_min, queue_after: q });
    }
    (next, events)
}

/// One recorded grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub x_bbr: Vec<f64>,
    pub x_cubic: Vec<f64>,
    pub phi_bbr: f64,
    pub queue: f64,
    pub loss: f64,
    pub tau_min: Vec<f64>,
    pub w: Vec<f64>,
}

impl Sample {
    pub fn x_bbr_total(&self) -> f64 {
        self.x_bbr.iter().sum()
    }
    pub fn x_cubic_total(&self) -> f64 {
        self.x_cubic.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub samples: Vec<Sample>,
    pub probes: Vec<ProbeEvent>,
}

impl Trace {
    /// Adopted τ_min of flow `flow` after each of its probes.
    pub fn probe_series(&self, flow: usize) -> Vec<f64> {
        self.probes.iter().filter(|p| p.flow == flow).map(|p| p.tau_min).collect()
    }

    pub fn probe_times(&self, flow: usize) -> Vec<f64> {
        self.probes.iter().filter(|p| p.flow == flow).map(|p| p.t).collect()
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> =
            ["t", "x_bbr_total", "x_cubic_total", "phi_bbr", "queue", "loss"].iter().map(|s| s.to_string()).collect();
        if let Some(s) = self.samples.first() {
            h.extend((0..s.tau_min.len()).map(|i| format!("tau_min_{i}")));
            h.extend((0..s.w.len()).map(|k| format!("w_{k}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for s in &self.samples {
            let mut rec = vec![
                s.t.to_string(),
                s.x_bbr_total().to_string(),
                s.x_cubic_total().to_string(),
                s.phi_bbr.to_string(),
                s.queue.to_string(),
                s.loss.to_string(),
            ];
            rec.extend(s.tau_min.iter().map(|v| v.to_string()));
            rec.extend(s.w.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.samples {
            let line = serde_json::to_string(s).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn write_probes_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "flow", "measured", "tau_min", "queue_after"])?;
        for p in &self.probes {
            w.write_record([
                p.t.to_string(),
                p.flow.to_string(),
                p.measured.to_string(),
                p.tau_min.to_string(),
                p.queue_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A running simulation. Owns its state; [`simulate`] is the batch wrapper.
pub struct Simulator {
    cfg: NetworkConfig,
    policy: AdaptationPolicy,
    settings: IntegratorSettings,
    strengths: Strengths,
    probing: bool,
    state: SystemState,
    ctx: ProbeContext,
    steps_done: usize,
    t0: f64,
    probes: Vec<ProbeEvent>,
    hint: f64,
}

impl Simulator {
    pub fn new(
        cfg: &NetworkConfig,
        policy: AdaptationPolicy,
        settings: IntegratorSettings,
        init: SystemState,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        settings.validate(cfg)?;
        init.validate(cfg)?;
        let seed = match policy {
            AdaptationPolicy::Randomized { seed } => seed,
            _ => seed,
        };
        let mut ctx = ProbeContext::new(cfg.n_bbr, seed);
        let mut state = init;
        if let AdaptationPolicy::Randomized { .. } = policy {
            for f in &mut state.bbr {
                f.probe_clock = ctx.draw_period(settings.probe_period);
            }
        }
        let t0 = state.t;
        Ok(Simulator {
            cfg: *cfg,
            policy,
            settings,
            strengths: Strengths::Rule(policy.strength_rule()),
            probing: true,
            state,
            ctx,
            steps_done: 0,
            t0,
            probes: Vec::new(),
            hint: settings.dt,
        })
    }

    /// Integration at fixed strengths with probing switched off.
    pub fn frozen(
        cfg: &NetworkConfig,
        alpha: f64,
        beta: f64,
        settings: IntegratorSettings,
        init: SystemState,
    ) -> Result<Self> {
        let mut sim = Simulator::new(cfg, AdaptationPolicy::Vanilla, settings, init, 0)?;
        sim.strengths = Strengths::Fixed { alpha, beta };
        sim.probing = false;
        Ok(sim)
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn probes(&self) -> &[ProbeEvent] {
        &self.probes
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps_done as f64 * self.settings.dt
    }

    /// Fire every probe that is due at the current grid point.
    fn probe_if_due(&mut self) {
        if !self.probing {
            return;
        }
        let half = 0.5 * self.settings.dt;
        let due: Vec<usize> =
            (0..self.state.bbr.len()).filter(|&i| self.state.bbr[i].probe_clock <= half).collect();
        if due.is_empty() {
            return;
        }
        let (next, events) =
            probe_step(&self.state, &self.cfg, &self.policy, &due, self.settings.probe_period, &mut self.ctx);
        self.state = next;
        self.probes.extend(events);
    }

    pub fn sample(&self) -> Result<Sample> {
        let r = total_load(&self.state, &self.cfg, self.strengths)?;
        Ok(Sample {
            t: self.state.t,
            phi_bbr: r.phi_bbr(),
            x_bbr: r.x_bbr,
            x_cubic: r.x_cubic,
            queue: self.state.queue,
            loss: r.loss,
            tau_min: self.state.bbr.iter().map(|f| f.tau_min).collect(),
            w: r.windows,
        })
    }

    /// Integrate `n` grid steps, probing at every grid point where a probe is
    /// due (including the final one) and calling `on_point` after probes.
    pub fn run_steps<F>(&mut self, n: usize, mut on_point: F) -> Result<()>
    where
        F: FnMut(&Simulator, usize) -> Result<()>,
    {
        let ode_dt = self.settings.dt;
        let mut scratch = None;
        for j in 0..=n {
            self.probe_if_due();
            on_point(self, j)?;
            if j == n {
                break;
            }
            let ode = Ode::new(&self.cfg, self.strengths, &self.state);
            let scratch = scratch.get_or_insert_with(|| Rk4Scratch::new(ode.dim()));
            let mut v = ode.pack(&self.state);
            let mut mode = ode.classify(&mut v);
            ode.advance(&mut v, &mut mode, ode_dt, &mut self.hint, scratch);
            ode.unpack(&v, &mut self.state);
            self.steps_done += 1;
            self.state.t = self.time();
            for f in &mut self.state.bbr {
                f.probe_clock -= ode_dt;
            }
            if !self.state.is_finite() {
                return Err(Error::NonFinite { t: self.state.t, what: format!("{:?}", self.state) });
            }
        }
        Ok(())
    }

    /// Integrate for `span` seconds without recording samples.
    pub fn run_for(&mut self, span: f64) -> Result<()> {
        let n = self.settings.steps(span);
        self.run_steps(n, |_, _| Ok(()))
    }
}

/// Run a full simulation and return the recorded trace.
pub fn simulate(
    cfg: &NetworkConfig,
    policy: AdaptationPolicy,
    settings: IntegratorSettings,
    init: SystemState,
    seed: u64,
) -> Result<Trace> {
    let mut sim = Simulator::new(cfg, policy, settings, init, seed)?;
    let n = settings.steps(settings.horizon);
    let dec = settings.decimation;
    let mut samples = Vec::with_capacity(n / dec + 2);
    sim.run_steps(n, |s, j| {
        if j % dec == 0 || j == n {
            samples.push(s.sample()?);
        }
        Ok(())
    })?;
    log::debug!("simulated {} s, {} probes", settings.horizon, sim.probes.len());
    Ok(Trace { samples, probes: sim.probes })
}

/// (max − min)/mean of the last `n` values, or `None` if there are fewer.
pub fn relative_spread(values: &[f64], n: usize) -> Option<f64> {
    if values.len() < n || n == 0 {
        return None;
    }
    let tail = &values[values.len() - n..];
    let max = tail.iter().cloned().fold(f64::MIN, f64::max);
    let min = tail.iter().cloned().fold(f64::MAX, f64::min);
    let mean = tail.iter().sum::<f64>() / n as f64;
    Some((max - min) / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BbrFlowState, CubicFlowState};
    use approx::assert_relative_eq;

    fn cfg() -> NetworkConfig {
        NetworkConfig::default_dumbbell()
    }

    fn v1() -> Strengths {
        Strengths::Rule(StrengthRule::Bbrv1)
    }

    #[test]
    fn no_loss_means_no_cubic_reset() {
        let c = cfg();
        let mut s = SystemState::initial(&c, 10.0);
        s.queue = 100.0;
        let d = derivative(&s, &c, v1());
        assert_eq!(d.w_max[0], 0.0);
        assert_eq!(d.s[0], 1.0);
    }

    #[test]
    fn uncongested_bbr_grows_at_alpha_minus_one() {
        let mut c = cfg();
        c.n_cubic = 0;
        let s = SystemState {
            t: 0.0,
            bbr: vec![BbrFlowState { x_btl: 1000.0, tau_min: 0.04, probe_clock: 10.0 }],
            cubic: vec![],
            queue: 0.0,
        };
        let d = derivative(&s, &c, v1());
        assert_relative_eq!(d.x_btl[0], 0.25 * 1000.0, max_relative = 1e-14);
    }

    #[test]
    fn s_grows_by_dt_without_loss() {
        let c = cfg();
        let mut s = SystemState::initial(&c, 10.0);
        s.queue = 10.0;
        let dt = 1e-3;
        let mut cur = s.clone();
        for _ in 0..100 {
            let next = step(&cur, &c, v1(), dt).unwrap();
            assert_relative_eq!(next.cubic[0].s - cur.cubic[0].s, dt, max_relative = 1e-9);
            cur = next;
        }
        assert_relative_eq!(cur.bbr[0].probe_clock, 10.0 - 0.1, max_relative = 1e-12);
    }

    #[test]
    fn zero_derivative_state_is_kept() {
        // lone BBR flow at capacity with a steady queue
        let mut c = cfg();
        c.n_cubic = 0;
        let s = SystemState {
            t: 0.0,
            bbr: vec![BbrFlowState { x_btl: c.capacity, tau_min: 0.04, probe_clock: 10.0 }],
            cubic: vec![],
            queue: 0.0,
        };
        let next = step(&s, &c, Strengths::Fixed { alpha: 1.0, beta: 1.0 }, 1e-3).unwrap();
        assert_eq!(next.bbr, vec![BbrFlowState { probe_clock: 10.0 - 1e-3, ..s.bbr[0] }]);
        assert_eq!(next.queue, s.queue);
        assert_relative_eq!(next.t, 1e-3);
    }

    #[test]
    fn probe_examples() {
        let c = cfg();
        let mut ctx = ProbeContext::new(1, 0);
        // windows so small that the back-off queue is empty
        let mut s = SystemState::initial(&c, 0.0);
        s.cubic[0] = CubicFlowState { w_max: 1.0, s: 0.0 };
        s.queue = c.buffer;
        let (n, _) = probe_step(&s, &c, &AdaptationPolicy::Vanilla, &[0], 10.0, &mut ctx);
        assert_eq!(n.bbr[0].tau_min, c.path_prop_delay);
        assert_eq!(n.queue, 0.0);
        // window 300 on a full queue
        let w_max = 300.0;
        s.cubic[0] = CubicFlowState { w_max, s: crate::model::cubic_plateau_time(w_max, &c) };
        let (n, ev) = probe_step(&s, &c, &AdaptationPolicy::Vanilla, &[0], 10.0, &mut ctx);
        assert_relative_eq!(n.queue, 130.666_666_666_666_67, max_relative = 1e-9);
        assert_relative_eq!(n.bbr[0].tau_min, 0.04 + 130.666_666_666_666_67 / c.capacity, max_relative = 1e-9);
        assert_relative_eq!(n.bbr[0].tau_min, 0.055_68, max_relative = 1e-4);
        assert_eq!(ev.len(), 1);
        assert_eq!(n.bbr[0].probe_clock, 10.0);
    }

    #[test]
    fn smoothed_theta_one_is_vanilla() {
        let c = cfg();
        let mut s = SystemState::initial(&c, 0.0);
        s.queue = c.buffer;
        s.cubic[0].w_max = 500.0;
        s.bbr[0].tau_min = 0.07;
        let mut ctx = ProbeContext::new(1, 0);
        let (a, _) = probe_step(&s, &c, &AdaptationPolicy::Vanilla, &[0], 10.0, &mut ctx);
        let (b, _) = probe_step(&s, &c, &AdaptationPolicy::Smoothed { theta: 1.0 }, &[0], 10.0, &mut ctx);
        assert_eq!(a, b);
        let (h, _) = probe_step(&s, &c, &AdaptationPolicy::Smoothed { theta: 0.5 }, &[0], 10.0, &mut ctx);
        assert_relative_eq!(h.bbr[0].tau_min, 0.5 * (0.07 + a.bbr[0].tau_min), max_relative = 1e-14);
    }

    #[test]
    fn detect_freeze_holds_mean_when_spread_is_large() {
        let c = cfg();
        let policy = AdaptationPolicy::DetectFreeze { kappa: 0.1, history_len: 5 };
        let mut ctx = ProbeContext::new(1, 0);
        let mut s = SystemState::initial(&c, 0.0);
        s.queue = c.buffer;
        let mut adopted = Vec::new();
        for w in [50.0, 800.0, 50.0, 800.0] {
            s.cubic[0] = CubicFlowState { w_max: w, s: crate::model::cubic_plateau_time(w, &c) };
            let (n, ev) = probe_step(&s, &c, &policy, &[0], 10.0, &mut ctx);
            adopted.push((ev[0].measured, n.bbr[0].tau_min));
        }
        // first probe has no history to judge
        assert_eq!(adopted[0].0, adopted[0].1);
        let mean2 = 0.5 * (adopted[0].0 + adopted[1].0);
        assert_relative_eq!(adopted[1].1, mean2, max_relative = 1e-14);
    }

    #[test]
    fn lone_bbr_flow_owns_the_link() {
        let mut c = cfg();
        c.n_cubic = 0;
        let init = SystemState {
            t: 0.0,
            bbr: vec![BbrFlowState { x_btl: c.capacity, tau_min: c.path_prop_delay, probe_clock: 10.0 }],
            cubic: vec![],
            queue: 0.0,
        };
        let settings = IntegratorSettings::for_config(&c).with_horizon(30.0);
        let tr = simulate(&c, AdaptationPolicy::Vanilla, settings, init, 1).unwrap();
        assert!(tr.samples.iter().all(|s| s.phi_bbr == 1.0));
    }

    #[test]
    fn invariants_hold_along_default_run() {
        let c = cfg();
        let settings = IntegratorSettings::for_config(&c).with_horizon(60.0);
        for policy in [
            AdaptationPolicy::Vanilla,
            AdaptationPolicy::Bbrv2,
            AdaptationPolicy::Smoothed { theta: 1.0 / 6.0 },
            AdaptationPolicy::Randomized { seed: 3 },
            AdaptationPolicy::DetectFreeze { kappa: 0.1, history_len: 5 },
            AdaptationPolicy::Bbrv3 { gain: 1.25 },
        ] {
            let mut sim = Simulator::new(&c, policy, settings, SystemState::initial(&c, 10.0), 7).unwrap();
            sim.run_steps(60_000, |s, _| {
                let st = s.state();
                assert!(st.queue >= 0.0 && st.queue <= c.buffer, "{policy:?} queue {}", st.queue);
                for f in &st.bbr {
                    assert!(f.x_btl >= c.chi && f.tau_min >= c.path_prop_delay);
                }
                for f in &st.cubic {
                    assert!(f.w_max > 0.0 && f.s >= 0.0);
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn bbrv2_strengths_never_exceed_vanilla_along_trajectory() {
        let c = cfg();
        let settings = IntegratorSettings::for_config(&c).with_horizon(40.0);
        let tr = simulate(&c, AdaptationPolicy::Vanilla, settings, SystemState::initial(&c, 10.0), 0).unwrap();
        let mut sim = Simulator::new(&c, AdaptationPolicy::Vanilla, settings, SystemState::initial(&c, 10.0), 0).unwrap();
        let mut checked = 0;
        sim.run_steps(40_000, |s, j| {
            if j % 100 == 0 {
                let st = s.state();
                let v1 = total_load(st, &c, Strengths::Rule(StrengthRule::Bbrv1))?;
                let v2 = total_load(st, &c, Strengths::Rule(StrengthRule::Bbrv2))?;
                assert!(v2.alpha[0] <= v1.alpha[0] && v2.beta[0] <= v1.beta[0]);
                checked += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(checked, tr.samples.len());
    }

    #[test]
    fn spread() {
        assert_eq!(relative_spread(&[1.0, 2.0], 3), None);
        assert_relative_eq!(relative_spread(&[5.0, 1.0, 1.0, 1.2], 3).unwrap(), 0.2 / (3.2 / 3.0));
    }
}
