//! Stability verdicts: local analysis of a short-term equilibrium via its
//! Jacobian and center-manifold coefficient, and the slope test on the
//! probe-to-probe window map that predicts persistent oscillation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::equilibrium::{build_update_functions_with, equilibrium_delay, ShortTermEquilibrium};
use crate::error::{Error, Result};
use crate::model::StrengthRule;

/// Points of the slope grid around w̄ (odd, so w̄ is a grid point).
pub const SLOPE_GRID: usize = 201;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearizationReport {
    pub alpha: f64,
    pub beta: f64,
    /// Rows are (x_btl, w_max, s).
    pub jacobian: [[f64; 3]; 3],
    /// Real parts, descending.
    pub eigenvalues: [f64; 3],
    /// Largest imaginary part seen by the eigensolver (should be ~0).
    pub max_imag: f64,
    pub center_eigvec: [f64; 3],
    /// Coefficient of the cubic term of the center-manifold dynamics.
    pub k: f64,
    pub loss: f64,
    pub stable: bool,
}

impl LinearizationReport {
    pub fn jacobian_norm(&self) -> f64 {
        self.jacobian.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// J11, J12, J31, J32, J33.
    pub fn nonzero_entries(&self) -> [f64; 5] {
        let j = &self.jacobian;
        [j[0][0], j[0][1], j[2][0], j[2][1], j[2][2]]
    }
}

/// Jacobian of (x_btl, w_max, s) at a short-term equilibrium with a full
/// queue, its spectrum, and the sign of the center-manifold coefficient.
pub fn linearize(eq: &ShortTermEquilibrium, cfg: &NetworkConfig) -> Result<LinearizationReport> {
    let tau = equilibrium_delay(cfg);
    let c = cfg.capacity;
    let s = eq.s_eq;
    let w = eq.w_max_eq;
    let x = eq.x_btl_eq;
    let (alpha, beta) = (eq.alpha, eq.beta);
    let p = cfg.cubic_b * tau / (cfg.cubic_c * s.powi(4));
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Precondition(format!("equilibrium loss rate {p} outside (0, 1]")));
    }
    let xc = w / tau;
    let da = alpha * x + xc;
    let db = beta * x + xc;
    let j11 = alpha * c * xc / (da * da) - 1.0;
    let j12 = -alpha * c * x / (tau * da * da);
    let j31 = -beta * c * s * w / (tau * db * db);
    let j32 = -s / tau * p - s * w / (tau * tau) * c / (db * db);
    let j33 = -1.0 / s;
    let jacobian = [[j11, j12, 0.0], [0.0, 0.0, 0.0], [j31, j32, j33]];

    let m = Matrix3::from_fn(|r, k| jacobian[r][k]);
    let ev = m.complex_eigenvalues();
    let mut eigenvalues = [ev[0].re, ev[1].re, ev[2].re];
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let max_imag = ev.iter().map(|z| z.im.abs()).fold(0.0, f64::max);

    let v1 = -1.0;
    let v2 = -j11 / j12 * v1;
    let v3 = (j11 * j32 - j12 * j31) / (j12 * j33) * v1;
    let k = cfg.cubic_c * w * v3.powi(3) * p / (tau * v2.powi(3));
    Ok(LinearizationReport {
        alpha,
        beta,
        jacobian,
        eigenvalues,
        max_imag,
        center_eigvec: [v1, v2, v3],
        k,
        loss: p,
        stable: k < 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstabilityVerdict {
    pub unstable: bool,
    /// Contiguous band around w̄ where the map is steeper than −1.
    pub omega: Option<(f64, f64)>,
    /// Most negative slope on the grid.
    pub max_slope: f64,
    /// Slope at w̄ itself.
    pub slope_at_w_bar: f64,
    pub w_bar: Option<f64>,
}

/// Slope test of the window map for classic BBR.
pub fn instability_condition(cfg: &NetworkConfig) -> Result<InstabilityVerdict> {
    instability_condition_with(cfg, StrengthRule::Bbrv1)
}

pub fn instability_condition_with(cfg: &NetworkConfig, rule: StrengthRule) -> Result<InstabilityVerdict> {
    instability_condition_step(cfg, rule, 1e-4)
}

/// Like [`instability_condition_with`] with the finite-difference step given
/// as a fraction of w1 − w0.
pub fn instability_condition_step(
    cfg: &NetworkConfig,
    rule: StrengthRule,
    step_fraction: f64,
) -> Result<InstabilityVerdict> {
    let uf = build_update_functions_with(cfg, rule)?;
    if uf.is_degenerate() {
        return Ok(InstabilityVerdict {
            unstable: false,
            omega: None,
            max_slope: 0.0,
            slope_at_w_bar: 0.0,
            w_bar: uf.long_term_equilibrium().ok(),
        });
    }
    let w_bar = uf.long_term_equilibrium()?;
    let span = uf.w1 - uf.w0;
    let h = span * step_fraction;
    let delta = 0.25 * span;
    let half = SLOPE_GRID / 2;
    let lo = (w_bar - delta).max(2.0 * h);
    let grid: Vec<f64> = (0..SLOPE_GRID)
        .map(|i| {
            if i < half {
                lo + (w_bar - lo) * i as f64 / half as f64
            } else if i == half {
                w_bar
            } else {
                w_bar + delta * (i - half) as f64 / half as f64
            }
        })
        .collect();
    let slope = |w: f64| slope_at(&uf, w, h);
    let slopes = grid.iter().map(|&w| slope(w)).collect::<Result<Vec<f64>>>()?;
    let max_slope = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let slope_at_w_bar = slopes[half];
    let unstable = slope_at_w_bar < -1.0;
    let omega = if unstable {
        let mut a = half;
        while a > 0 && slopes[a - 1] < -1.0 {
            a -= 1;
        }
        let mut b = half;
        while b + 1 < slopes.len() && slopes[b + 1] < -1.0 {
            b += 1;
        }
        // the band edges usually fall between grid points
        let edge = |inside: f64, outside: f64| -> Result<f64> {
            let (mut i, mut o) = (inside, outside);
            for _ in 0..60 {
                let m = 0.5 * (i + o);
                if (o - i).abs() <= 1e-12 * m.abs() {
                    break;
                }
                if slope(m)? < -1.0 {
                    i = m;
                } else {
                    o = m;
                }
            }
            Ok(i)
        };
        let lo = if a > 0 { edge(grid[a], grid[a - 1])? } else { grid[a] };
        let hi = if b + 1 < grid.len() { edge(grid[b], grid[b + 1])? } else { grid[b] };
        Some((lo, hi))
    } else {
        None
    };
    Ok(InstabilityVerdict { unstable, omega, max_slope, slope_at_w_bar, w_bar: Some(w_bar) })
}

/// Centered difference of w̃← at `w`, starting from step `h` and halving
/// until two estimates agree to 0.1%. The map is continuous but has a very
/// steep segment where α crosses α̂, narrower than the nominal step.
fn slope_at(uf: &crate::equilibrium::UpdateFunctions, w: f64, h: f64) -> Result<f64> {
    let cd = |h: f64| -> Result<f64> { Ok((uf.window_update(w + h)? - uf.window_update(w - h)?) / (2.0 * h)) };
    let mut h = h;
    let mut prev = cd(h)?;
    for _ in 0..MAX_HALVINGS {
        h *= 0.5;
        let next = cd(h)?;
        if (next - prev).abs() <= 1e-3 * next.abs().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

const MAX_HALVINGS: usize = 12;

/// Network parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Mbps.
    Capacity,
    /// Seconds.
    PathPropDelay,
    /// Buffer size in path BDPs.
    BufferBdpMultiple,
    /// Bottleneck delay as a fraction of the path delay.
    BtlDelayFraction,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Capacity => "capacity",
            SweepParam::PathPropDelay => "path_prop_delay",
            SweepParam::BufferBdpMultiple => "buffer_bdp_multiple",
            SweepParam::BtlDelayFraction => "btl_delay_fraction",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "capacity" | "mbps" => SweepParam::Capacity,
            "path_prop_delay" | "prop_delay" => SweepParam::PathPropDelay,
            "buffer_bdp_multiple" | "buffer" | "buffer_bdp" => SweepParam::BufferBdpMultiple,
            "btl_delay_fraction" => SweepParam::BtlDelayFraction,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter {other:?} (expected capacity, path_prop_delay, \
                     buffer_bdp_multiple or btl_delay_fraction)"
                )))
            }
        })
    }
}

/// `lo..=hi` in `steps` evenly spaced values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl SweepAxis {
    pub fn new(param: SweepParam, lo: f64, hi: f64, steps: usize) -> Result<Self> {
        let axis = SweepAxis { param, lo, hi, steps };
        axis.validate()?;
        Ok(axis)
    }

    pub fn fixed(param: SweepParam, value: f64) -> Self {
        SweepAxis { param, lo: value, hi: value, steps: 1 }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config(format!("{}: steps must be >= 1", self.param)));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo > 0.0 && self.hi >= self.lo) {
            return Err(Error::Config(format!(
                "{}: need 0 < lo <= hi, got {}..{}",
                self.param, self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let n = (self.steps - 1) as f64;
        (0..self.steps).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n).collect()
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    /// `name:lo:hi:steps`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("malformed range {s:?}, expected name:lo:hi:steps")));
        }
        let num = |t: &str| -> Result<f64> {
            t.parse().map_err(|_| Error::Config(format!("malformed number {t:?} in range {s:?}")))
        };
        let steps = parts[3]
            .parse()
            .map_err(|_| Error::Config(format!("malformed step count {:?} in range {s:?}", parts[3])))?;
        SweepAxis::new(parts[0].parse()?, num(parts[1])?, num(parts[2])?, steps)
    }
}

/// The four sweepable quantities of a config.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepPoint {
    mbps: f64,
    path_prop_delay: f64,
    bdp_multiple: f64,
    btl_fraction: f64,
}

impl SweepPoint {
    fn of(cfg: &NetworkConfig) -> Self {
        SweepPoint {
            mbps: cfg.capacity_mbps(),
            path_prop_delay: cfg.path_prop_delay,
            bdp_multiple: cfg.buffer / cfg.bdp(),
            btl_fraction: cfg.btl_prop_delay / cfg.path_prop_delay,
        }
    }

    fn set(&mut self, p: SweepParam, v: f64) {
        match p {
            SweepParam::Capacity => self.mbps = v,
            SweepParam::PathPropDelay => self.path_prop_delay = v,
            SweepParam::BufferBdpMultiple => self.bdp_multiple = v,
            SweepParam::BtlDelayFraction => self.btl_fraction = v,
        }
    }

    /// Rebuild `base` at this point; χ stays the same fraction of capacity.
    fn apply(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut cfg = NetworkConfig::from_mbps(self.mbps, self.path_prop_delay, self.btl_fraction, self.bdp_multiple);
        cfg.capacity = self.mbps * 1e6 / (8.0 * base.mss);
        cfg.buffer = self.bdp_multiple * cfg.bdp();
        cfg.mss = base.mss;
        cfg.chi = base.chi / base.capacity * cfg.capacity;
        cfg.n_bbr = base.n_bbr;
        cfg.n_cubic = base.n_cubic;
        cfg.cubic_b = base.cubic_b;
        cfg.cubic_c = base.cubic_c;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub x_value: f64,
    pub y_value: f64,
    pub verdict: Option<InstabilityVerdict>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn unstable(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.unstable)
    }
}

/// Cells in row-major order: x outer, y inner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub x: SweepAxis,
    pub y: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> &SweepCell {
        &self.cells[ix * self.y.steps + iy]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x_name", "x_value", "y_name", "y_value", "unstable", "max_slope", "w_bar", "error"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cells {
            let v = c.verdict.as_ref();
            w.write_record([
                self.x.param.name().to_string(),
                c.x_value.to_string(),
                self.y.param.name().to_string(),
                c.y_value.to_string(),
                (c.unstable() as u8).to_string(),
                opt(v.map(|v| v.max_slope)),
                opt(v.and_then(|v| v.w_bar)),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Config of one sweep cell: `base` with the two swept parameters replaced.
pub fn sweep_config(base: &NetworkConfig, x: (SweepParam, f64), y: (SweepParam, f64)) -> NetworkConfig {
    let mut p = SweepPoint::of(base);
    p.set(x.0, x.1);
    p.set(y.0, y.1);
    p.apply(base)
}

/// Evaluate the slope test on an x × y grid. Cells run in parallel; a cell
/// whose solve fails records the error and the sweep carries on.
pub fn sweep(base: &NetworkConfig, x: SweepAxis, y: SweepAxis, rule: StrengthRule) -> Result<SweepGrid> {
    x.validate()?;
    y.validate()?;
    let xs = x.values();
    let ys = y.values();
    let jobs: Vec<(f64, f64)> = xs.iter().flat_map(|&a| ys.iter().map(move |&b| (a, b))).collect();
    let cells = jobs
        .par_iter()
        .map(|&(xv, yv)| {
            let cfg = sweep_config(base, (x.param, xv), (y.param, yv));
            let result = cfg.validate().and_then(|_| instability_condition_with(&cfg, rule));
            match result {
                Ok(v) => SweepCell { x_value: xv, y_value: yv, verdict: Some(v), error: None },
                Err(e) => {
                    log::warn!("sweep cell {}={xv} {}={yv}: {e}", x.param, y.param);
                    SweepCell { x_value: xv, y_value: yv, verdict: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    Ok(SweepGrid { x, y, cells })
}
