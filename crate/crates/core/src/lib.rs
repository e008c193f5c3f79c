//! Resource-parity tooling for comparing mixture-of-experts and dense
//! transformers at equal total parameters `N`, training compute `C` and
//! data `D`.
//!
//! - [`arch`]: closed-form parameter and FLOP accounting.
//! - [`kernel`]: a double-precision MoE block with a verified backward pass.
//! - [`search`]: MoE configuration search and dense baselines.
//! - [`fixtures`]: the published configuration tables and their validation.
//! - [`planner`]: sweeps, data-reuse schedules and learning-rate/batch-size
//!   power laws.
//! - [`toy_lab`]: small synthetic training runs of a one-block MoE model.
//! - [`cli`]: the `moebudget` command-line front end.
//!
//! Runnable examples live in `examples/`.

pub mod arch;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod kernel;
pub mod planner;
pub mod search;
pub mod toy_lab;

pub use error::{Error, Result};
