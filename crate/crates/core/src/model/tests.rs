use super::*;
use crate::corpus::parse_corpus;

fn corpus() -> Corpus {
    parse_corpus(
        "la\tp a t e r\tp a d r e\n\
         la\tm a t e r\tm a d r e\n\
         gr\tp a t e r\tp a t e r\n\
         gr\tt r e s\tt r i s\n\
         sk\tp a t e r\tp i t a r\n",
    )
    .unwrap()
}

fn tiny(mode: EmbeddingMode, seed: u64) -> TransducerModel {
    let config = ModelConfig {
        mode,
        lang_dim: 3,
        emb_dim: 4,
        hidden_dim: 5,
        max_decode_len: 8,
        seed,
    };
    TransducerModel::new(config, &corpus()).unwrap()
}

fn monotone_paths(steps: usize, positions: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..steps {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                let lo = p.last().copied().unwrap_or(0);
                (lo..positions).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    out
}

// per-path probabilities straight from the lattice tables
fn enumerate(l: &Lattice) -> f64 {
    monotone_paths(l.steps(), l.positions())
        .iter()
        .map(|path| {
            let mut prev = 0;
            let mut lp = 0.0;
            for (t, &j) in path.iter().enumerate() {
                let z: f64 = (prev..l.positions()).map(|k| l.score(t, k).exp()).sum();
                lp += l.score(t, j) - z.ln() + l.emit(t, j);
                prev = j;
            }
            lp.exp()
        })
        .sum::<f64>()
        .ln()
}

#[test]
fn dp_matches_brute_force_on_model_lattices() {
    let m = tiny(EmbeddingMode::Dense, 3);
    let c = corpus();
    let x = &c.pairs[3].etymon[..3];
    let y = &c.pairs[3].reflex[..2];
    let l = m.lattice_for_targets(x, y, LanguageInput::Id(LanguageId(1))).unwrap();
    assert_eq!(monotone_paths(2, 3).len(), 6);
    assert!((l.log_likelihood() - enumerate(&l)).abs() < 1e-12);

    for p in &c.pairs {
        let x = &p.etymon[..p.etymon.len().min(4)];
        let y = &p.reflex[..p.reflex.len().min(3)];
        let l = m.alignment_lattice(x, y, p.language).unwrap();
        let ll = m.sequence_log_likelihood(x, y, p.language).unwrap();
        assert!((ll - enumerate(&l)).abs() < 1e-10);
        assert!(ll <= 0.0);
    }
}

#[test]
fn prefix_probabilities_sum_to_one() {
    let m = tiny(EmbeddingMode::Sigmoid, 5);
    let v = m.output_vocab().len();
    let x = &corpus().pairs[0].etymon;
    let mut total = 0.0;
    for a in 0..v {
        for b in 0..v {
            let l = m.lattice_for_targets(x, &[a, b], LanguageInput::Id(LanguageId(0))).unwrap();
            total += l.log_likelihood().exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-10, "{total}");
}

#[test]
fn batched_loss_matches_per_example_likelihoods() {
    let m = tiny(EmbeddingMode::Dense, 7);
    let c = corpus();
    let batch: Vec<&CognatePair> = c.pairs.iter().collect();
    let tokens: usize = batch.iter().map(|p| p.reflex.len() + 1).sum();
    let (loss, _) = m.loss_and_gradients(&batch).unwrap();
    let direct: f64 = batch
        .iter()
        .map(|p| m.sequence_log_likelihood(&p.etymon, &p.reflex, p.language).unwrap())
        .sum();
    assert!((loss + direct / tokens as f64).abs() < 1e-12);
}

fn finite_difference_check(mode: EmbeddingMode, skip: &[&str]) {
    let mut m = tiny(mode, 11);
    let c = corpus();
    let batch: Vec<&CognatePair> = c.pairs.iter().collect();
    let (_, grads) = m.loss_and_gradients(&batch).unwrap();
    let h = 1e-5;
    for (k, name) in Parameters::NAMES.iter().enumerate() {
        if skip.contains(name) {
            continue;
        }
        let n = m.parameters().tensors()[k].numel();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for i in (0..n).step_by((n / 7).max(1)) {
            let orig = m.parameters().tensors()[k].data()[i];
            let mut eval = |v: f64| {
                m.parameters_mut().tensors_mut()[k].data_mut()[i] = v;
                m.loss_and_gradients(&batch).unwrap().0
            };
            let d = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            num.push(d);
            ana.push(grads[k][i]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(diff < 1e-4 * scale + 1e-9, "{mode} {name}: {num:?} vs {ana:?}");
    }
}

#[test]
fn gradients_match_finite_differences_dense() {
    finite_difference_check(EmbeddingMode::Dense, &[]);
}

#[test]
fn gradients_match_finite_differences_sigmoid() {
    finite_difference_check(EmbeddingMode::Sigmoid, &[]);
}

#[test]
fn st_gradients_match_downstream_of_the_threshold() {
    finite_difference_check(EmbeddingMode::St, &["lang_embedding"]);
}

#[test]
fn st_embedding_reads_binary() {
    let m = tiny(EmbeddingMode::St, 1);
    for l in 0..3 {
        let z = m.read_language_embedding(LanguageId(l)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0 || v == 1.0));
    }
    assert!(matches!(
        m.read_language_embedding(LanguageId(9)),
        Err(ModelError::UnknownLanguage(_))
    ));
}

#[test]
fn viterbi_is_monotone_and_covers_y() {
    let m = tiny(EmbeddingMode::Dense, 2);
    for p in &corpus().pairs {
        let a = m.viterbi_alignment(&p.etymon, &p.reflex, p.language).unwrap();
        assert_eq!(a.0.len(), p.reflex.len());
        assert!(a.is_monotone());
        assert!(a.0.iter().all(|&j| j < p.etymon.len()));
    }
}

#[test]
fn greedy_decode_respects_cap_and_is_deterministic() {
    let m = tiny(EmbeddingMode::Dense, 4);
    let x = &corpus().pairs[0].etymon;
    let a = m.greedy_decode(x, LanguageInput::Id(LanguageId(0)), 3).unwrap();
    assert!(a.len() <= 3);
    assert!(a.iter().all(|&v| v >= m.output_vocab().reserved()));
    assert_eq!(a, m.greedy_decode(x, LanguageInput::Id(LanguageId(0)), 3).unwrap());
    assert!(m.greedy_decode(x, LanguageInput::Id(LanguageId(0)), 0).unwrap().is_empty());
}

#[test]
fn activated_vector_input_matches_learned_language() {
    for mode in EmbeddingMode::ALL {
        let m = tiny(mode, 6);
        let x = &corpus().pairs[1].etymon;
        let z = m.read_language_embedding(LanguageId(2)).unwrap();
        let by_id = m.encode(x, LanguageInput::Id(LanguageId(2))).unwrap();
        let by_vec = m.encode(x, LanguageInput::Activated(&z)).unwrap();
        assert_eq!(by_id, by_vec);
        assert_eq!(
            m.decode(x, LanguageInput::Id(LanguageId(2))).unwrap(),
            m.decode(x, LanguageInput::Activated(&z)).unwrap()
        );
    }
    let m = tiny(EmbeddingMode::Dense, 6);
    assert!(m.encode(&[0], LanguageInput::Activated(&[1.0])).is_err());
}

#[test]
fn input_validation() {
    let m = tiny(EmbeddingMode::Dense, 0);
    let l = LanguageId(0);
    assert!(matches!(m.sequence_log_likelihood(&[], &[3], l), Err(ModelError::EmptySequence(_))));
    assert!(matches!(
        m.sequence_log_likelihood(&[999], &[3], l),
        Err(ModelError::OutOfVocabulary { .. })
    ));
    assert!(matches!(
        m.sequence_log_likelihood(&[0], &[EOS], l),
        Err(ModelError::OutOfVocabulary { .. })
    ));
    assert!(matches!(
        m.sequence_log_likelihood(&[0], &[3], LanguageId(7)),
        Err(ModelError::UnknownLanguage(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = tiny(EmbeddingMode::Sigmoid, 8);
    let back = TransducerModel::from_bytes(&m.to_bytes()).unwrap();
    assert_eq!(m, back);
    let x = &corpus().pairs[2].etymon;
    let l = LanguageInput::Id(LanguageId(1));
    assert_eq!(m.decode(x, l).unwrap(), back.decode(x, l).unwrap());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let bytes = tiny(EmbeddingMode::Dense, 8).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(TransducerModel::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(
        TransducerModel::from_bytes(&bad),
        Err(CheckpointError::Version { found: 99, .. })
    ));
    assert!(matches!(
        TransducerModel::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Truncated { .. })
    ));
    assert!(matches!(
        TransducerModel::from_bytes(&bytes[..30]),
        Err(CheckpointError::Truncated { .. })
    ));
    let mut bad = bytes.clone();
    bad[22] = b'}';
    assert!(matches!(TransducerModel::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
}

#[test]
fn mode_parsing() {
    assert_eq!("ST".parse::<EmbeddingMode>().unwrap(), EmbeddingMode::St);
    assert_eq!("dense".parse::<EmbeddingMode>().unwrap().to_string(), "dense");
    assert!("binary".parse::<EmbeddingMode>().is_err());
}
