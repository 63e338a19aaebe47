//! Experiment harness behind the `dlfd` binary: dataset generation, original
//! training, single-method unlearning and multi-method comparison reports.

pub mod config;
pub mod harness;
pub mod report;

use dlfd_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const PARTIAL_FAILURE: i32 = 4;
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Input(_) | Error::Format(_) => exit::USAGE,
        Error::Numeric(_) | Error::Evaluator(_) => exit::NUMERIC,
        _ => exit::OTHER,
    }
}
