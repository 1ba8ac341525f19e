//! JSON-lines run reports and configuration hashing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use hbe::metrics::Metrics;
use hbe::solver::{Diagnostics, SolverConfig};
use hbe::Result;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Non-finite numbers are not valid JSON; `+∞` becomes the string `"inf"`.
pub fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v == f64::INFINITY {
        json!("inf")
    } else if v == f64::NEG_INFINITY {
        json!("-inf")
    } else {
        json!("nan")
    }
}

pub fn metrics_json(m: &Metrics) -> Value {
    json!({ "psnr": number(m.psnr), "mse": number(m.mse) })
}

pub fn diagnostics_json(d: &Diagnostics) -> Value {
    json!({
        "outer_iterations": d.outer_iterations,
        "groups_per_iteration": d.groups_per_iteration,
        "singleton_groups": d.singleton_groups,
        "failed_groups": d.failed_groups,
        "failures": d.failures,
        "inner_iterations": d.inner_iterations,
    })
}

/// Canonical `key=value` listing of every setting that affects the output.
pub fn canonical_solver(cfg: &SolverConfig) -> String {
    format!(
        "alpha_low={:?}\nalpha_high={:?}\npm_threshold={:?}\nm_nominal={:?}\nouter_iters={}\ninner_max_iters={}\ninner_rel_tol={:?}\ninit_mode={:?}\npatch_side={}\nwindow_side={}\nepsilon={:?}\nstep={}\nmin_group={}\nunknown_weight={:?}\n",
        cfg.alpha_low,
        cfg.alpha_high,
        cfg.pm_threshold,
        cfg.m_nominal,
        cfg.outer_iters,
        cfg.inner.max_iters,
        cfg.inner.rel_tol,
        cfg.init_mode,
        cfg.search.patch_side,
        cfg.search.window_side,
        cfg.search.epsilon,
        cfg.search.step,
        cfg.search.min_group,
        cfg.search.unknown_weight,
    )
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Writes the report to stdout and, if given, appends it to a file.
pub fn emit(report: &Value, path: Option<&Path>) -> Result<()> {
    let line = serde_json::to_string(report).expect("report serializes");
    println!("{line}");
    if let Some(path) = path {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}
