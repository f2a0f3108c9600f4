//! Trains a small straight-through model on a six-language synthetic
//! family, saves it, reloads it and decodes a handful of etyma.
//!
//! cargo run --release --example train_and_decode -- [epochs]

use reflex::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use reflex::corpus::CognatePair;
use reflex::model::{EmbeddingMode, LanguageInput, ModelConfig, TransducerModel};
use reflex::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let lexicon = random_lexicon(&LexiconShape::default(), 150, 3);
    let corpus = generate_synthetic(&lexicon, &parse_rules(include_str!("data/family6.rules"))?, 3)?;

    let config = ModelConfig {
        mode: EmbeddingMode::St,
        lang_dim: 8,
        emb_dim: 16,
        hidden_dim: 32,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut model = TransducerModel::new(config, &corpus)?;
    let pairs: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let history = train(&mut model, &pairs, &tc, |s| {
        if (s.epoch + 1) % 10 == 0 {
            eprintln!("epoch {:>3} loss {:.4}", s.epoch + 1, s.loss);
        }
    })?;
    println!("final training loss {:.4}", history.last().map_or(f64::NAN, |s| s.loss));

    let path = std::env::temp_dir().join("reflex-example.ckpt");
    std::fs::write(&path, model.to_bytes())?;
    let model = TransducerModel::from_bytes(&std::fs::read(&path)?)?;

    for p in corpus.pairs.iter().step_by(150).take(6) {
        let y = model.decode(&p.etymon, LanguageInput::Id(p.language))?;
        println!(
            "{:>3}  {:<12} → {:<12} (gold {})",
            corpus.languages.name(p.language),
            corpus.etymon_text(p),
            model.output_vocab().render(&y),
            corpus.output_vocab.render(&p.reflex),
        );
    }
    Ok(())
}
