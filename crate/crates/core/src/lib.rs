//! Uncertainty-aware execution of multi-step workflows: sense semantic
//! uncertainty from Monte Carlo samples, route each step to a direct,
//! branching or refining regime, and trace failures back to a root cause.

pub mod calibration;
pub mod correcting;
pub mod engine;
pub mod error;
pub mod graph;
pub mod providers;
pub mod regulating;
pub mod report;
pub mod sensing;
pub mod streams;
pub mod trace;
pub mod types;

pub use error::{CoreError, Result};
