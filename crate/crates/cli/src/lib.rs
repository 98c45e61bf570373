//! Command-line orchestration of the bound, identification and analysis
//! stages. Each stage reads and writes a run directory:
//!
//! | file | stage |
//! |---|---|
//! | `config.toml` | every stage (resolved configuration) |
//! | `ensemble.csv`, `bound.csv`, `bound_full.csv`, `bound_summary.json` | `bound` |
//! | `estimates/run_NNNN.csv` or `estimates/run_NNNN.failed` | `identify` |
//! | `reference/run_NNNN.csv`, `bias.csv`, `report.csv`, `report_summary.json` | `analyze` |
//! | `manifest.json` | every stage |

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

pub use config::{CliOverrides, RunConfig};
pub use error::{CliError, Result};
