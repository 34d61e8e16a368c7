//! Monte Carlo privacy accounting for correlated-noise DP training under
//! balls-in-bins batching.
//!
//! Each capability has a runnable example:
//!
//! ```bash
//! cargo run --release --example calibrate
//! ```
//!
//! | example | shows |
//! |---|---|
//! | `calibrate` | noise multiplier for a target `(eps, delta)` |
//! | `verify_release` | estimate-verify-release at a fresh sample |
//! | `estimate_epsilon` | epsilon for a given sigma and delta |
//! | `rmse_sweep` | amplified vs unamplified RMSE as CSV |
//! | `optimize_toeplitz`, `optimize_blt` | gradient-based strategy search |
//! | `counterexample` | why signs of the strategy matrix matter under adaptivity |
//! | `noise_stream` | streaming correlated noise with BLT state |
//! | `balls_in_bins` | batch assignment, padding and truncation |
//! | `train_synthetic` | the three training modes on a synthetic task |

// Negated comparisons double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod baseline;
pub mod batching;
pub mod cli;
pub mod error;
pub mod harness;
pub mod matrix;
mod numerics;
pub mod optimizer;
pub mod oracle;

pub use error::{Error, Result};
