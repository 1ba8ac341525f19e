//! Library side of the `hbe` command-line tool: configuration, problem files,
//! reports and the benchmark runner.

pub mod commands;
pub mod config;
pub mod report;
