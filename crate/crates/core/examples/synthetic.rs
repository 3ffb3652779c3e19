//! Trains on the sentinel corpus and prints per-epoch loss and test F1.
//!
//! cargo run --release -p mrc-ner --example synthetic -- [epochs] [seed] [PositionIndex]
//!
//! `VARIANTS` sets sentinel variants per type and `FRACTION` the training
//! subsample fraction.

use std::time::Instant;

use mrc_ner::eval::evaluate_spans;
use mrc_ner::par::Execution;
use mrc_ner::query::QueryCatalog;
use mrc_ner::synthetic::{self, SyntheticConfig};
use mrc_ner::train::{predict_sentences, train_model, TrainConfig};

fn main() -> mrc_ner::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let seed = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0);
    let position_index = args.get(3).is_some_and(|a| a == "PositionIndex");

    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let variants = env("VARIANTS").map_or(96, |v| v as usize);
    let train_cfg = SyntheticConfig {
        seed,
        variants,
        ..SyntheticConfig::default()
    };
    let test_cfg = SyntheticConfig {
        sentences: 100,
        seed: seed + 1000,
        id_prefix: "test".into(),
        variants,
        ..SyntheticConfig::default()
    };
    let train = synthetic::generate(&train_cfg)?;
    let test = synthetic::generate(&test_cfg)?;
    let tags = synthetic::tag_set(&train_cfg)?;
    let catalog = if position_index {
        QueryCatalog::position_index("synthetic")
    } else {
        synthetic::sentinel_catalog(&train_cfg.types, variants)
    };
    let vocab = synthetic::vocabulary(&train_cfg, &[]);
    println!("nested fraction {:.3}", synthetic::stats(&train).nested_fraction());

    let config = TrainConfig {
        epochs,
        seed,
        subsample_fraction: env("FRACTION").unwrap_or(1.0),
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train_model(&config, &train, &tags, &catalog, &vocab, Execution::Parallel)?;
    for e in &outcome.epochs {
        println!(
            "epoch {:2}  start {:.4}  end {:.4}  span {:.4}  total {:.4}",
            e.epoch, e.loss.start, e.loss.end, e.loss.span, e.loss.total
        );
    }
    let pred = predict_sentences(
        &outcome.checkpoint,
        &tags,
        &catalog,
        &test,
        &config.decode_config(),
        Execution::Parallel,
    )?;
    let report = evaluate_spans(&test, &pred, Execution::Parallel)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
