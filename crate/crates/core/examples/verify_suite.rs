//! The full equivalence suite, then the same suite against deliberately
//! broken kernels to show each defect is caught.
//!
//!     cargo run --release --example verify_suite -- [seed]

use joformer::oracle::{equivalence_suite, equivalence_suite_with, render_reports, Mutation};

/// Whether the intact suite passes, and for each defect whether it was caught.
pub fn run_example(seed: u64) -> anyhow::Result<(bool, Vec<(Mutation, bool)>)> {
    let reports = equivalence_suite(seed);
    print!("{}", render_reports(&reports));
    let clean = reports.iter().all(|r| r.pass);

    let mut caught = Vec::new();
    for m in Mutation::DEFECTS {
        let failing: Vec<String> = equivalence_suite_with(seed, m)
            .into_iter()
            .filter(|r| !r.pass)
            .map(|r| r.name)
            .collect();
        println!("{m:?}: {} failing check(s) {failing:?}", failing.len());
        caught.push((m, !failing.is_empty()));
    }
    Ok((clean, caught))
}

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let (clean, caught) = run_example(seed)?;
    anyhow::ensure!(clean && caught.iter().all(|(_, c)| *c), "suite is not sound");
    Ok(())
}
