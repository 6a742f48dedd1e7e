//! Command-line pipeline: synthetic data generation, batch solving, evaluation and the
//! training demo, all driven by one versioned JSON config.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod pipeline;
pub mod solve;
pub mod synthgen;
pub mod train_demo;

use fmba_core::Error;

pub use config::RunConfig;

/// Process exit code for a failed command: 1 for degenerate or numeric failures, 2 for
/// I/O and configuration errors.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        1
    } else {
        2
    }
}
