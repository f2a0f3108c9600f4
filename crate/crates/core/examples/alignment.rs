//! Looks inside the monotone alignment lattice of an untrained model:
//! the exact marginal likelihood, the best alignment and its share of
//! the probability mass, and a finite-difference check of the loss
//! gradient.
//!
//! cargo run --release --example alignment

use reflex::corpus::{parse_corpus, CognatePair};
use reflex::model::{EmbeddingMode, ModelConfig, TransducerModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = parse_corpus("la\tk a n t a\tt ʃ a n t\ngr\tp a t e r\tp a t ɛ r\n")?;
    let config = ModelConfig {
        mode: EmbeddingMode::Dense,
        lang_dim: 4,
        emb_dim: 6,
        hidden_dim: 8,
        seed: 9,
        ..ModelConfig::default()
    };
    let model = TransducerModel::new(config, &corpus)?;

    for p in &corpus.pairs {
        let lattice = model.alignment_lattice(&p.etymon, &p.reflex, p.language)?;
        let total = lattice.log_likelihood();
        let (path, best) = lattice.viterbi();
        println!(
            "{} → {}: log p = {total:.4}; best alignment {:?} carries {:.1}% of the mass",
            corpus.etymon_text(p),
            corpus.output_vocab.render(&p.reflex),
            path.positions(),
            100.0 * (best - total).exp(),
        );
    }

    // central differences on every weight against the analytic gradient
    let mut model = model;
    let batch: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let (_, grads) = model.loss_and_gradients(&batch)?;
    let h = 1e-5;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, analytic) in grads.iter().enumerate() {
        for (i, &g) in analytic.iter().enumerate() {
            let orig = model.parameters().tensors()[k].data()[i];
            let mut at = |v: f64| -> Result<f64, reflex::model::ModelError> {
                model.parameters_mut().tensors_mut()[k].data_mut()[i] = v;
                Ok(model.loss_and_gradients(&batch)?.0)
            };
            let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            model.parameters_mut().tensors_mut()[k].data_mut()[i] = orig;
            num += (g - numeric).powi(2);
            den += g * g;
        }
    }
    println!("relative gradient error {:.2e}", (num / den).sqrt());
    Ok(())
}
