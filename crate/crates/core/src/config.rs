//! Link and flow configuration.
//!
//! Internally everything is in segments, segments per second and seconds.
//! The JSON loader accepts a few friendlier spellings (Mbps, bytes, BDP
//! multiples) and converts them once, up front.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MSS: f64 = 1500.0;
pub const DEFAULT_CUBIC_B: f64 = 0.3;
pub const DEFAULT_CUBIC_C: f64 = 0.4;
/// χ as a fraction of capacity when the config leaves it out.
pub const DEFAULT_CHI_FRACTION: f64 = 0.01;

/// A single-bottleneck dumbbell: N_B BBR flows and N_C CUBIC flows share
/// one link of capacity C with a drop-tail buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Segments per second.
    pub capacity: f64,
    /// Round-trip propagation delay of every flow, seconds.
    pub path_prop_delay: f64,
    /// One-way propagation delay of the bottleneck link itself, seconds.
    pub btl_prop_delay: f64,
    /// Buffer size in segments.
    pub buffer: f64,
    pub n_bbr: usize,
    pub n_cubic: usize,
    /// Bytes per segment. Only used for unit conversion.
    pub mss: f64,
    /// Floor of the BBR bandwidth estimate, segments per second.
    pub chi: f64,
    pub cubic_b: f64,
    pub cubic_c: f64,
}

impl NetworkConfig {
    /// 100 Mbps, 40 ms RTT, 10 ms bottleneck delay, 1.5 BDP buffer, one flow each.
    pub fn default_dumbbell() -> Self {
        Self::from_mbps(100.0, 0.040, 0.25, 1.5)
    }

    /// Convenience constructor used by sweeps: the bottleneck delay is
    /// `btl_fraction * path_prop_delay` and the buffer is `bdp_multiple` BDPs.
    pub fn from_mbps(mbps: f64, path_prop_delay: f64, btl_fraction: f64, bdp_multiple: f64) -> Self {
        let capacity = mbps_to_segments(mbps, DEFAULT_MSS);
        NetworkConfig {
            capacity,
            path_prop_delay,
            btl_prop_delay: btl_fraction * path_prop_delay,
            buffer: bdp_multiple * capacity * path_prop_delay,
            n_bbr: 1,
            n_cubic: 1,
            mss: DEFAULT_MSS,
            chi: DEFAULT_CHI_FRACTION * capacity,
            cubic_b: DEFAULT_CUBIC_B,
            cubic_c: DEFAULT_CUBIC_C,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let finite = [
            ("capacity", self.capacity),
            ("path_prop_delay", self.path_prop_delay),
            ("btl_prop_delay", self.btl_prop_delay),
            ("buffer", self.buffer),
            ("mss", self.mss),
            ("chi", self.chi),
            ("cubic_b", self.cubic_b),
            ("cubic_c", self.cubic_c),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.capacity <= 0.0 {
            return bad(format!("capacity must be > 0, got {}", self.capacity));
        }
        if self.buffer <= 0.0 {
            return bad(format!("buffer must be > 0, got {}", self.buffer));
        }
        if self.path_prop_delay <= 0.0 {
            return bad(format!("path_prop_delay must be > 0, got {}", self.path_prop_delay));
        }
        if !(self.btl_prop_delay > 0.0 && self.btl_prop_delay <= self.path_prop_delay) {
            return bad(format!(
                "btl_prop_delay must lie in (0, path_prop_delay = {}], got {}",
                self.path_prop_delay, self.btl_prop_delay
            ));
        }
        if !(self.chi > 0.0 && self.chi < self.capacity) {
            return bad(format!("chi must lie in (0, capacity), got {}", self.chi));
        }
        if !(self.cubic_b > 0.0 && self.cubic_b < 1.0) {
            return bad(format!("cubic_b must lie in (0, 1), got {}", self.cubic_b));
        }
        if self.cubic_c <= 0.0 {
            return bad(format!("cubic_c must be > 0, got {}", self.cubic_c));
        }
        if self.mss <= 0.0 {
            return bad(format!("mss must be > 0, got {}", self.mss));
        }
        if self.n_bbr + self.n_cubic == 0 {
            return bad("at least one flow is required".into());
        }
        Ok(())
    }

    /// Bandwidth-delay product in segments.
    pub fn bdp(&self) -> f64 {
        self.capacity * self.path_prop_delay
    }

    pub fn capacity_mbps(&self) -> f64 {
        self.capacity * 8.0 * self.mss / 1e6
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.resolve()
    }

    /// Serialize back into the loader's format, in segments.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "segments_per_sec": self.capacity,
            "path_prop_delay": self.path_prop_delay,
            "btl_prop_delay": self.btl_prop_delay,
            "buffer": self.buffer,
            "n_bbr": self.n_bbr,
            "n_cubic": self.n_cubic,
            "mss": self.mss,
            "chi": self.chi,
            "cubic_b": self.cubic_b,
            "cubic_c": self.cubic_c,
        })
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn mbps_to_segments(mbps: f64, mss: f64) -> f64 {
    mbps * 1e6 / (8.0 * mss)
}

/// On-disk shape. Exactly one capacity key and exactly one buffer key.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mbps: Option<f64>,
    segments_per_sec: Option<f64>,
    path_prop_delay: f64,
    btl_prop_delay: f64,
    buffer: Option<f64>,
    buffer_bytes: Option<f64>,
    buffer_bdp: Option<f64>,
    #[serde(default = "one")]
    n_bbr: usize,
    #[serde(default = "one")]
    n_cubic: usize,
    mss: Option<f64>,
    chi: Option<f64>,
    cubic_b: Option<f64>,
    cubic_c: Option<f64>,
    // Free-form annotation, ignored.
    #[serde(default, rename = "description")]
    _description: Option<String>,
}

fn one() -> usize {
    1
}

impl RawConfig {
    fn resolve(self) -> Result<NetworkConfig> {
        let mss = self.mss.unwrap_or(DEFAULT_MSS);
        let capacity = match (self.mbps, self.segments_per_sec) {
            (Some(m), None) => mbps_to_segments(m, mss),
            (None, Some(s)) => s,
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either \"mbps\" or \"segments_per_sec\", not both".into()))
            }
            (None, None) => {
                return Err(Error::Config("missing capacity: \"mbps\" or \"segments_per_sec\"".into()))
            }
        };
        let buffer = match (self.buffer, self.buffer_bytes, self.buffer_bdp) {
            (Some(b), None, None) => b,
            (None, Some(bytes), None) => bytes / mss,
            (None, None, Some(m)) => m * capacity * self.path_prop_delay,
            (None, None, None) => {
                return Err(Error::Config(
                    "missing buffer: one of \"buffer\", \"buffer_bytes\", \"buffer_bdp\"".into(),
                ))
            }
            _ => {
                return Err(Error::Config(
                    "give exactly one of \"buffer\", \"buffer_bytes\", \"buffer_bdp\"".into(),
                ))
            }
        };
        let cfg = NetworkConfig {
            capacity,
            path_prop_delay: self.path_prop_delay,
            btl_prop_delay: self.btl_prop_delay,
            buffer,
            n_bbr: self.n_bbr,
            n_cubic: self.n_cubic,
            mss,
            chi: self.chi.unwrap_or(DEFAULT_CHI_FRACTION * capacity),
            cubic_b: self.cubic_b.unwrap_or(DEFAULT_CUBIC_B),
            cubic_c: self.cubic_c.unwrap_or(DEFAULT_CUBIC_C),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
