//! Fluid model of BBR and CUBIC flows sharing a drop-tail bottleneck, with
//! tools to find its equilibria, judge their stability and characterize the
//! oscillation that appears when the long-term equilibrium is unstable.

pub mod config;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod model;
pub mod oscillation;
pub mod roots;
pub mod stability;

pub use config::NetworkConfig;
pub use error::{Error, Result};
