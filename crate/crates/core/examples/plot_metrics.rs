//! Renders metrics CSV files into one validation-loss SVG.
//!
//!     cargo run --example plot_metrics -- out.svg run1/metrics.csv run2/metrics.csv ...

use std::path::{Path, PathBuf};

use joformer::metrics::{emit_loss_plot, read_metrics_csv, validation_curves};

/// Number of plotted curves.
pub fn run_example(csvs: &[PathBuf], out: &Path) -> anyhow::Result<usize> {
    let mut records = Vec::new();
    for path in csvs {
        records.extend(read_metrics_csv(path)?);
    }
    let curves = validation_curves(&records);
    for ((variant, n), curve) in &curves {
        let (step, loss) = curve.last().copied().unwrap_or((0, f64::NAN));
        println!("{variant} L{n}: {} points, last step {step} loss {loss:.4}", curve.len());
    }
    emit_loss_plot(&records, "Validation loss", out)?;
    println!("wrote {}", out.display());
    Ok(curves.len())
}

fn main() -> anyhow::Result<()> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    anyhow::ensure!(args.len() >= 2, "usage: plot_metrics OUT.svg METRICS.csv...");
    run_example(&args[1..], &args[0])?;
    Ok(())
}
