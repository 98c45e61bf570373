//! Posterior Cramér-Rao lower bound for Bayesian parameter identification in
//! nonlinear state-space models, a particle filter with artificial parameter
//! dynamics, and Monte Carlo error analysis of its estimates against the bound.
//!
//! ```
//! use pcrlb_core::{model::registry, pcrlb::{run_pcrlb, PcrlbOptions}};
//!
//! let model = registry::build(registry::BENCHMARK).unwrap();
//! let run = run_pcrlb(&model, 50, 10, 7, PcrlbOptions::default()).unwrap();
//! assert_eq!(run.bounds.bounds.len(), 11);
//! ```

pub mod analysis;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod model;
pub mod par;
pub mod pcrlb;
pub mod rng;
pub mod smc;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
