//! Trains one character-level model and writes its metrics and checkpoint.
//!
//!     cargo run --release --example train_char_lm -- [corpus] [variant] [steps] [out]
//!
//! `corpus` is a local file or URL (default: the Tiny Shakespeare URL, cached
//! under `$JOFORMER_DATA_DIR` or `./data`).

use std::path::Path;

use joformer::data::{default_cache_dir, load_or_fetch, Dataset, DEFAULT_CORPUS_URL};
use joformer::metrics::{write_metrics_csv, Split};
use joformer::model::write_checkpoint;
use joformer::training::{train_run_observed, TrainConfig, TrainOutcome};
use joformer::{ModelConfig, Variant};

pub fn run_example(
    source: &str,
    variant: Variant,
    model: Option<ModelConfig>,
    train: TrainConfig,
    out: &Path,
) -> anyhow::Result<TrainOutcome> {
    let text = load_or_fetch(source, &default_cache_dir())?.text;
    let data = Dataset::from_text(&text)?;
    println!(
        "{} characters, vocabulary {}, {} train / {} validation",
        text.len(),
        data.vocab.len(),
        data.split.train.len(),
        data.split.val.len()
    );
    let mut config = model.unwrap_or_else(|| ModelConfig::standard(variant, 1, data.vocab.len()));
    config.variant = variant;
    config.vocab_size = data.vocab.len();

    let seed = train.seeds[0];
    let outcome = train_run_observed(&config, &train, seed, &data, &mut |r| {
        if r.split == Split::Val {
            println!("step {:>5}  val loss {:.4}  ppl {:.3}", r.step, r.loss, r.perplexity);
        }
    })?;
    std::fs::create_dir_all(out)?;
    write_metrics_csv(&outcome.log, &out.join("metrics.csv"))?;
    write_checkpoint(&out.join("model.ckpt"), &config, &outcome.params)?;
    println!("wrote {}", out.display());
    Ok(outcome)
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let source = args.first().map_or(DEFAULT_CORPUS_URL, String::as_str);
    let variant: Variant = args.get(1).map_or(Ok(Variant::JoFormerPerToken), |s| s.parse())?;
    let steps = args.get(2).map_or(Ok(500), |s| s.parse())?;
    let out = args.get(3).map_or("out/example-train", String::as_str);
    let train = TrainConfig {
        total_steps: steps,
        eval_every: 100,
        seeds: vec![1],
        ..TrainConfig::default()
    };
    run_example(source, variant, None, train, Path::new(out))?;
    Ok(())
}
