//! Saves a trained model, reads it back and re-evaluates it: the reloaded
//! validation loss matches the one logged during training.
//!
//!     cargo run --release --example checkpoint_eval -- [corpus] [steps]

use joformer::data::{default_cache_dir, load_or_fetch, Dataset, DEFAULT_CORPUS_URL};
use joformer::metrics::evaluate;
use joformer::model::{read_checkpoint, write_checkpoint};
use joformer::training::{train_run, TrainConfig};
use joformer::{ModelConfig, Variant};

/// `(logged final validation loss, loss of the reloaded checkpoint)`.
pub fn run_example(source: &str, model: Option<ModelConfig>, train: TrainConfig) -> anyhow::Result<(f64, f64)> {
    let data = Dataset::from_text(&load_or_fetch(source, &default_cache_dir())?.text)?;
    let mut config = model.unwrap_or_else(|| ModelConfig::standard(Variant::JoFormerPerToken, 1, data.vocab.len()));
    config.vocab_size = data.vocab.len();
    let outcome = train_run(&config, &train, train.seeds[0], &data)?;
    let logged = outcome.final_val().map(|r| r.loss).unwrap_or(f64::NAN);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &config, &outcome.params)?;
    println!("checkpoint: {} bytes", std::fs::metadata(&path)?.len());
    let restored = read_checkpoint(&path)?;
    anyhow::ensure!(restored.params == outcome.params, "parameters changed on disk");
    let reloaded = evaluate(&restored.params, &restored.config, &data.split.val, train.seq_len)?.loss;
    println!("logged final val loss {logged:.8}  reloaded {reloaded:.8}");
    Ok((logged, reloaded))
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let source = args.first().map_or(DEFAULT_CORPUS_URL, String::as_str);
    let steps = args.get(1).map_or(Ok(200), |s| s.parse())?;
    let train = TrainConfig {
        total_steps: steps,
        eval_every: steps,
        seeds: vec![1],
        ..TrainConfig::default()
    };
    run_example(source, None, train)?;
    Ok(())
}
