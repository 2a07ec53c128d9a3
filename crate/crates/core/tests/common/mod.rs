#![allow(dead_code)]

use std::path::{Path, PathBuf};

use joformer::training::TrainConfig;
use joformer::{ModelConfig, Variant};

/// A few kilobytes of repetitive English with enough structure to learn.
pub fn toy_text() -> String {
    let lines = [
        "First, the king rode out to meet the river at dawn.\n",
        "Second, the queen spoke softly of bread and of wine.\n",
        "Then all the people sang, and the bells rang loud!\n",
        "What is the hour? It is late, my lord; the fire is low.\n",
    ];
    let mut text = String::new();
    for i in 0..120 {
        text.push_str(lines[i % lines.len()]);
        if i % 7 == 0 {
            text.push_str("Enough.\n");
        }
    }
    text
}

pub fn write_toy_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("toy.txt");
    std::fs::write(&path, toy_text()).unwrap();
    path
}

pub fn tiny_model(variant: Variant, vocab: usize) -> ModelConfig {
    ModelConfig::new(variant, 1, 16, 8, vocab)
}

pub fn tiny_train(steps: usize, seeds: Vec<u64>) -> TrainConfig {
    TrainConfig {
        lr0: 3e-3,
        total_steps: steps,
        batch_size: 8,
        seq_len: 8,
        seeds,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

/// `key = value` configuration for the command-line tests.
pub const TINY_CONFIG: &str = "d_model = 16\ncontext_len = 8\nseq_len = 8\nbatch_size = 8\nlr0 = 0.003\neval_every = 10\n";
