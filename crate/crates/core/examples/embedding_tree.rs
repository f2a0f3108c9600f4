//! Trains on a six-language family with nested shared changes, builds a
//! neighbor-joining tree from the language embeddings and scores it
//! against the true family tree.
//!
//! cargo run --release --example embedding_tree -- [mode] [epochs]

use reflex::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use reflex::model::{EmbeddingMode, ModelConfig, TransducerModel};
use reflex::phylo::{cosine_distance_matrix, emit_newick, neighbor_join, parse_newick, quartet_comparison};
use reflex::training::{train_on_corpus, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: EmbeddingMode = args.first().map_or("sigmoid", String::as_str).parse()?;
    let epochs: usize = args.get(1).map_or(Ok(200), |s| s.parse())?;

    let lexicon = random_lexicon(&LexiconShape::default(), 150, 3);
    let corpus = generate_synthetic(&lexicon, &parse_rules(include_str!("data/family6.rules"))?, 3)?;
    let config = ModelConfig {
        mode,
        lang_dim: 8,
        emb_dim: 16,
        hidden_dim: 32,
        seed: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { epochs, seed: 3, ..TrainConfig::default() };
    let (model, _) = train_on_corpus(&corpus, &config, &tc, |_| {})?;

    let items = embeddings(&model)?;
    let d = cosine_distance_matrix(&items)?;
    print!("{}", d.to_tsv());
    let tree = neighbor_join(&d)?;
    println!("{}", emit_newick(&tree));

    let reference = parse_newick(include_str!("data/family6.nwk").trim())?;
    let q = quartet_comparison(&tree, &reference)?;
    println!("GQD {:.3} ({} of {} resolved quartets differ)", q.distance()?, q.differing, q.resolved_in_reference);
    Ok(())
}

fn embeddings(model: &TransducerModel) -> Result<Vec<(String, Vec<f64>)>, reflex::model::ModelError> {
    model
        .languages()
        .iter()
        .map(|(id, name)| Ok((name.to_string(), model.read_language_embedding(id)?)))
        .collect()
}
