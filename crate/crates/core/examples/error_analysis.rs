//! Holds out a slice of a synthetic corpus, trains on the rest and sorts
//! every wrong edit in the held-out predictions into same-language,
//! other-language and unmotivated sound changes.
//!
//! cargo run --release --example error_analysis -- [epochs]

use reflex::analysis::{classify_errors, extract_rules};
use reflex::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use reflex::corpus::CognatePair;
use reflex::model::{EmbeddingMode, ModelConfig, TransducerModel};
use reflex::training::{decode_pairs, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let lexicon = random_lexicon(&LexiconShape::default(), 200, 11);
    let corpus = generate_synthetic(&lexicon, &parse_rules(include_str!("data/rules.txt"))?, 11)?;
    let (test, rest): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|i| i % 10 == 0);

    let config = ModelConfig {
        mode: EmbeddingMode::St,
        lang_dim: 8,
        emb_dim: 16,
        hidden_dim: 32,
        ..ModelConfig::default()
    };
    let mut model = TransducerModel::new(config, &corpus)?;
    let train_pairs: Vec<&CognatePair> = rest.iter().map(|&i| &corpus.pairs[i]).collect();
    train(&mut model, &train_pairs, &TrainConfig { epochs, ..TrainConfig::default() }, |_| {})?;

    let records = decode_pairs(&model, &corpus, &test)?;
    let wrong = records.iter().filter(|d| !d.is_correct()).count();
    println!("{wrong} of {} held-out reflexes wrong", records.len());

    // Viterbi rules of the trained model over every gold pair.
    let all: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let inventory = extract_rules(&model, &all)?;
    println!("{} attested rules", inventory.len());

    let b = classify_errors(&model, &inventory, &records)?;
    println!(
        "SL {:.3}  OL {:.3}  U {:.3}  ({} erroneous edits)",
        b.same_language,
        b.other_language,
        b.unmotivated,
        b.edits.len()
    );
    print!("{}", b.to_tsv().lines().take(11).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
