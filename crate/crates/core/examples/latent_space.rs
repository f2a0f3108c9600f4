//! Probes the binary language space of a straight-through model: which
//! dimensions each language uses, what single-bit flips do to a
//! reflex, what random codes produce, and whether a mixed-in proportion
//! of one language shows up in the suffix of the output.
//!
//! cargo run --release --example latent_space -- [epochs]

use reflex::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use reflex::latent::{
    activity_heatmap, distinct_etyma, echo_experiment, nearest_neighbors, parse_cohorts, sample_latent,
    SamplingRegime,
};
use reflex::model::{EmbeddingMode, ModelConfig};
use reflex::training::{train_on_corpus, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let lexicon = random_lexicon(&LexiconShape::default(), 150, 3);
    let corpus = generate_synthetic(&lexicon, &parse_rules(include_str!("data/family6.rules"))?, 3)?;
    let config = ModelConfig {
        mode: EmbeddingMode::St,
        lang_dim: 8,
        emb_dim: 16,
        hidden_dim: 32,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, _) = train_on_corpus(&corpus, &config, &tc, |_| {})?;

    let heat = activity_heatmap(&model)?;
    print!("{}", heat.to_tsv());

    let lang = model.language("a1")?;
    let x = model.input_vocab().encode("p a t a")?;
    let nb = nearest_neighbors(&model, lang, &x)?;
    print!("{}", nb.to_tsv(&model));

    let etyma = distinct_etyma(&corpus, 20);
    for spec in ["binomial:0.2", "binomial:0.5", "binomial:0.8"] {
        let regime = SamplingRegime { samples: 50, ..spec.parse()? };
        let rep = sample_latent(&model, &regime, &etyma, 7)?;
        println!("{regime}: {:.2} distinct outputs per etymon", rep.mean_unique());
    }

    let cohorts = parse_cohorts(include_str!("data/cohorts.tsv"))?;
    let echo = echo_experiment(&model, &cohorts, &[0.2, 0.5, 0.8], 7)?;
    print!("{}", echo.to_tsv());
    Ok(())
}
