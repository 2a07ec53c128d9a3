//! Trains all three variants over a few seeds at one depth, prints the
//! perplexity table and writes a validation-loss plot.
//!
//!     cargo run --release --example compare_variants -- [corpus] [steps] [seeds] [out]

use std::path::Path;

use joformer::data::{default_cache_dir, load_or_fetch, Dataset, DEFAULT_CORPUS_URL};
use joformer::metrics::{emit_loss_plot, summarize_table, Summary};
use joformer::training::{multi_seed_run, TrainConfig};
use joformer::{ModelConfig, Variant};

pub fn run_example(
    source: &str,
    base: Option<ModelConfig>,
    train: TrainConfig,
    out: &Path,
) -> anyhow::Result<Summary> {
    let data = Dataset::from_text(&load_or_fetch(source, &default_cache_dir())?.text)?;
    let base = base.unwrap_or_else(|| ModelConfig::standard(Variant::RoFormer, 1, data.vocab.len()));
    let mut records = Vec::new();
    for variant in Variant::ALL {
        let config = ModelConfig {
            variant,
            vocab_size: data.vocab.len(),
            ..base.clone()
        };
        let (summary, outcomes) = multi_seed_run(&config, &train, &data)?;
        println!("{:<22} mean final ppl {:.3}  per seed {:?}", variant.label(), summary.mean_perplexity, summary.per_seed);
        records.extend(outcomes.into_iter().flat_map(|o| o.log));
    }
    let summary = summarize_table(&records, &Variant::ALL, &[base.n_layers]);
    print!("\n{}", summary.render());
    std::fs::create_dir_all(out)?;
    let plot = out.join("val_loss.svg");
    emit_loss_plot(&records, &format!("Validation loss, {} layer(s)", base.n_layers), &plot)?;
    println!("plot: {}", plot.display());
    Ok(summary)
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let source = args.first().map_or(DEFAULT_CORPUS_URL, String::as_str);
    let steps = args.get(1).map_or(Ok(500), |s| s.parse())?;
    let seeds: u64 = args.get(2).map_or(Ok(2), |s| s.parse())?;
    let out = args.get(3).map_or("out/example-compare", String::as_str);
    let train = TrainConfig {
        total_steps: steps,
        eval_every: 100,
        seeds: (1..=seeds).collect(),
        ..TrainConfig::default()
    };
    run_example(source, None, train, Path::new(out))?;
    Ok(())
}
