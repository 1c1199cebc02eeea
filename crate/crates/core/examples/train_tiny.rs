//! Trains a small next-token model and a small refiner on part of the
//! bundled corpus and prints their masked validation accuracy.
//!
//! `cargo run --release --example train_tiny -- 300` sets the iteration count.

use agr_lab::corpus::BUNDLED;
use agr_lab::dataset::{Split, TokenDataset};
use agr_lab::model::ModelConfig;
use agr_lab::permute::Objective;
use agr_lab::tokenizer::Scheme;
use agr_lab::train::{train, TrainConfig};

fn main() -> agr_lab::Result<()> {
    let iters = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let text: String = BUNDLED.chars().take(200_000).collect();
    let data = TokenDataset::from_text(&text, Scheme::Char)?;
    println!("{} tokens, vocabulary {}", data.ids.len(), data.vocab_size());

    for objective in [Objective::NextToken, Objective::SecondToLast] {
        let cfg = TrainConfig {
            objective,
            max_iters: iters,
            warmup_iters: iters / 10,
            eval_interval: iters / 4,
            batch_size: 16,
            model: ModelConfig { n_layer: 2, n_head: 2, emb_dim: 64, block_size: 32, vocab_size: data.vocab_size(), dropout: 0.0 },
            ..Default::default()
        };
        let out = train(&cfg, &data, None)?;
        let last = out.last(Split::Val).unwrap();
        println!("{}: val loss {:.3}, masked accuracy {:.1}%", objective.tag(), last.loss, 100.0 * last.masked_accuracy);
    }
    Ok(())
}
