//! A per-token model whose angle rows all equal the rotary schedule behaves
//! exactly like the fixed-angle model, and fixed-angle scores equal RoFormer
//! scores bit for bit.
//!
//!     cargo run --example rope_recovery -- [batches] [seed]

use joformer::oracle::{check_rope_recovery, check_scores_bitwise, render_reports};

pub fn run_example(batches: usize, seed: u64) -> anyhow::Result<bool> {
    let reports = [check_rope_recovery(seed, batches), check_scores_bitwise(seed, batches)];
    print!("{}", render_reports(&reports));
    Ok(reports.iter().all(|r| r.pass))
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let batches = args.first().map_or(Ok(20), |s| s.parse())?;
    let seed = args.get(1).map_or(Ok(0), |s| s.parse())?;
    anyhow::ensure!(run_example(batches, seed)?, "equivalence failed");
    Ok(())
}
