//! Finite-difference check of every parameter gradient, angle table
//! included, for each variant.
//!
//!     cargo run --release --example grad_check -- [seed]

use joformer::oracle::{grad_check_config, grad_check_model, render_reports, OracleReport, TOL_GRAD};
use joformer::Variant;

pub fn run_example(seed: u64) -> anyhow::Result<Vec<OracleReport>> {
    let reports: Vec<OracleReport> = Variant::ALL
        .iter()
        .map(|&v| grad_check_model(&grad_check_config(v), seed, TOL_GRAD))
        .collect();
    print!("{}", render_reports(&reports));
    Ok(reports)
}

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let reports = run_example(seed)?;
    anyhow::ensure!(reports.iter().all(|r| r.pass), "gradient check failed");
    Ok(())
}
