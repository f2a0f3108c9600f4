//! Generates a three-language rule-derived corpus and cross-validates
//! the transducer on it.
//!
//! cargo run --release --example synthetic_kfold -- [mode] [epochs] [k] [hidden]

use std::time::Instant;

use reflex::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use reflex::model::{EmbeddingMode, ModelConfig};
use reflex::training::{run_kfold, TrainConfig};

const RULES: &str = include_str!("data/rules.txt");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: EmbeddingMode = args.first().map_or("sigmoid", String::as_str).parse()?;
    let epochs: usize = args.get(1).map_or(Ok(200), |s| s.parse())?;
    let k: usize = args.get(2).map_or(Ok(10), |s| s.parse())?;
    let hidden: usize = args.get(3).map_or(Ok(64), |s| s.parse())?;

    let lexicon = random_lexicon(&LexiconShape::default(), 500, 11);
    let corpus = generate_synthetic(&lexicon, &parse_rules(RULES)?, 11)?;
    let model = ModelConfig {
        mode,
        lang_dim: hidden / 4,
        emb_dim: hidden / 2,
        hidden_dim: hidden,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs,
        seed: 5,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = run_kfold(&corpus, &model, &train, k, 1, |fold, s| {
        if s.epoch % 20 == 19 || s.epoch == 0 {
            eprintln!("fold {fold} epoch {:>3} loss {:.4} ({:.2}s)", s.epoch + 1, s.loss, s.seconds);
        }
    })?;
    print!("{}", report.metrics_tsv(&corpus));
    eprintln!("{} pairs, {:.1}s", corpus.len(), start.elapsed().as_secs_f64());
    Ok(())
}
