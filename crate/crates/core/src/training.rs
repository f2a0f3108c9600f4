//! Mini-batch maximum-likelihood training and the K-fold driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_folds, CognatePair, Corpus, CorpusError, LanguageId};
use crate::metrics::{evaluate, EvalRecord, EvalSummary, MetricsError};
use crate::model::{LanguageInput, ModelConfig, ModelError, Parameters, TransducerModel};
use crate::tensor::{adam_step, seeded_rng, AdamState, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Seeds batch shuffling (and, in K-fold runs, everything per fold).
    pub seed: u64,
    /// Pairs per forward pass inside a batch. Gradients are accumulated
    /// over micro-batches before the single Adam step, so this trades
    /// memory and padding for nothing numerically.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            clip_norm: None,
            seed: 0,
            micro_batch: 64,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let clip_ok = self.clip_norm.is_none_or(|c| c.is_finite() && c > 0.0);
        if self.batch_size == 0 || self.micro_batch == 0 || !lr_ok || !clip_ok {
            return Err(TrainError::Config(format!(
                "batch size, micro-batch, learning rate and clip norm must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch (nats per token).
    pub loss: f64,
    pub seconds: f64,
}

/// One Adam step on `batch`. Returns the per-token loss before the step.
pub fn train_step(
    model: &mut TransducerModel,
    batch: &[&CognatePair],
    optimizer: &mut AdamState,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let tokens: usize = batch.iter().map(|p| p.reflex.len() + 1).sum();
    let mut order: Vec<&CognatePair> = batch.to_vec();
    // similar lengths share a micro-batch, which keeps padding low
    order.sort_by_key(|p| (p.etymon.len(), p.reflex.len()));
    let mut grads: Vec<Vec<f64>> = model.parameters().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut loss = 0.0;
    for chunk in order.chunks(config.micro_batch) {
        let mut tape = Tape::new();
        let (l, vars) = model.loss_on_tape(&mut tape, chunk, tokens as f64)?;
        loss += tape.value(l).data()[0];
        let g = tape.backward(l)?;
        for (acc, v) in grads.iter_mut().zip(vars) {
            if let Some(gv) = g.get(v) {
                acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
            }
        }
    }
    if !loss.is_finite() {
        return Ok(loss);
    }
    if let Some(max) = config.clip_norm {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let mut params = model.parameters_mut().tensors_mut();
    for (p, g) in params.iter_mut().zip(&grads) {
        p.zero_grad();
        p.accumulate_grad(g);
    }
    adam_step(&mut params, optimizer)?;
    params.iter_mut().for_each(|p| p.zero_grad());
    Ok(loss)
}

/// Trains `model` in place on `pairs`.
///
/// Runs `epochs × ⌈N / batch⌉` Adam steps; the batch order is reshuffled
/// every epoch from `config.seed`. `on_epoch` sees each epoch's stats.
pub fn train(
    model: &mut TransducerModel,
    pairs: &[&CognatePair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let mut optimizer = AdamState::new(config.learning_rate);
    let mut order: Vec<&CognatePair> = pairs.to_vec();
    let total_tokens: usize = pairs.iter().map(|p| p.reflex.len() + 1).sum();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let loss = train_step(model, batch, &mut optimizer, config)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            let tokens: usize = batch.iter().map(|p| p.reflex.len() + 1).sum();
            weighted += loss * tokens as f64;
        }
        let stats = EpochStats {
            epoch,
            loss: weighted / total_tokens as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Fresh model over `corpus` trained on every pair.
pub fn train_on_corpus(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TransducerModel, Vec<EpochStats>), TrainError> {
    let mut model = TransducerModel::new(model_config.clone(), corpus)?;
    let pairs: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let history = train(&mut model, &pairs, config, on_epoch)?;
    Ok((model, history))
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A held-out pair with the model's prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub index: usize,
    pub language: LanguageId,
    pub etymon: Vec<usize>,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl Decoded {
    pub fn is_correct(&self) -> bool {
        self.gold == self.predicted
    }

    fn record(&self) -> EvalRecord {
        EvalRecord {
            language: self.language,
            gold: self.gold.clone(),
            predicted: self.predicted.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub summary: EvalSummary,
    pub decoded: Vec<Decoded>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    /// Pooled over every held-out pair of every fold.
    pub aggregate: EvalSummary,
}

/// Greedy predictions for `indices` of `corpus`.
pub fn decode_pairs(model: &TransducerModel, corpus: &Corpus, indices: &[usize]) -> Result<Vec<Decoded>, TrainError> {
    indices
        .iter()
        .map(|&i| {
            let p = &corpus.pairs[i];
            let predicted = model.decode(&p.etymon, LanguageInput::Id(p.language))?;
            Ok(Decoded {
                index: i,
                language: p.language,
                etymon: p.etymon.clone(),
                gold: p.reflex.clone(),
                predicted,
            })
        })
        .collect()
}

/// K-fold cross-validation with one independently seeded model per fold.
///
/// Fold `f` initializes its model from `derive_seed(seed, 2f)` and
/// shuffles batches from `derive_seed(seed, 2f + 1)`, where `seed` is
/// `train.seed`; the split itself uses `seed` directly. Up to `jobs`
/// folds run concurrently; results do not depend on `jobs`.
pub fn run_kfold(
    corpus: &Corpus,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    jobs: usize,
    on_epoch: impl Fn(usize, &EpochStats) + Sync,
) -> Result<KFoldReport, TrainError> {
    train_config.validate()?;
    let splits = make_folds(corpus, k, train_config.seed)?;
    let run_fold = |fold: usize| -> Result<FoldResult, TrainError> {
        let split = &splits[fold];
        let mc = ModelConfig {
            seed: derive_seed(train_config.seed, 2 * fold as u64),
            ..model_config.clone()
        };
        let tc = TrainConfig {
            seed: derive_seed(train_config.seed, 2 * fold as u64 + 1),
            ..train_config.clone()
        };
        let mut model = TransducerModel::new(mc, corpus)?;
        let pairs: Vec<&CognatePair> = split.train.iter().map(|&i| &corpus.pairs[i]).collect();
        let history = train(&mut model, &pairs, &tc, |s| on_epoch(fold, s))?;
        let decoded = decode_pairs(&model, corpus, &split.test)?;
        let records: Vec<EvalRecord> = decoded.iter().map(Decoded::record).collect();
        Ok(FoldResult {
            fold,
            summary: evaluate(&records)?,
            decoded,
            history,
        })
    };

    let jobs = jobs.clamp(1, k);
    let mut results: Vec<Option<Result<FoldResult, TrainError>>> = (0..k).map(|_| None).collect();
    if jobs == 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(fold));
        }
    } else {
        let next = Mutex::new(0usize);
        let done = Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let fold = {
                        let mut n = next.lock().expect("fold counter");
                        let f = *n;
                        *n += 1;
                        f
                    };
                    if fold >= k {
                        break;
                    }
                    let r = run_fold(fold);
                    done.lock().expect("results")[fold] = Some(r);
                });
            }
        });
    }
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<EvalRecord> = folds.iter().flat_map(|f| f.decoded.iter().map(Decoded::record)).collect();
    Ok(KFoldReport {
        aggregate: evaluate(&all)?,
        folds,
    })
}

fn fmt_rate(x: f64) -> String {
    format!("{x:.6}")
}

impl KFoldReport {
    /// `language  fold  wer  per  n` rows per fold and language, then the
    /// pooled rows with fold `all`; language `*` is every language.
    pub fn metrics_tsv(&self, corpus: &Corpus) -> String {
        let mut out = String::from("language\tfold\twer\tper\tn\n");
        let mut row = |lang: &str, fold: &str, r: &crate::metrics::Rates| {
            let _ = writeln!(out, "{lang}\t{fold}\t{}\t{}\t{}", fmt_rate(r.wer), fmt_rate(r.per), r.count);
        };
        for f in &self.folds {
            for (l, r) in &f.summary.by_language {
                row(corpus.languages.name(*l), &f.fold.to_string(), r);
            }
            row("*", &f.fold.to_string(), &f.summary.overall);
        }
        for (l, r) in &self.aggregate.by_language {
            row(corpus.languages.name(*l), "all", r);
        }
        row("*", "all", &self.aggregate.overall);
        out
    }

    /// Every held-out prediction, ordered by corpus position.
    pub fn decoded_tsv(&self, corpus: &Corpus) -> String {
        let mut all: Vec<(usize, &Decoded)> = self
            .folds
            .iter()
            .flat_map(|f| f.decoded.iter().map(move |d| (f.fold, d)))
            .collect();
        all.sort_by_key(|(_, d)| d.index);
        decoded_tsv(corpus, all.into_iter().map(|(f, d)| (Some(f), d)))
    }

    /// Mean final-epoch training loss per fold, by fold.
    pub fn final_losses(&self) -> BTreeMap<usize, f64> {
        self.folds
            .iter()
            .filter_map(|f| f.history.last().map(|h| (f.fold, h.loss)))
            .collect()
    }
}

/// `index  language  fold  etymon  gold  predicted  correct` rows; `index`
/// is the pair's line position among the corpus pairs.
pub fn decoded_tsv<'a>(corpus: &Corpus, rows: impl IntoIterator<Item = (Option<usize>, &'a Decoded)>) -> String {
    let mut out = String::from("index\tlanguage\tfold\tetymon\tgold\tpredicted\tcorrect\n");
    for (fold, d) in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            d.index,
            corpus.languages.name(d.language),
            fold.map_or_else(|| "-".to_string(), |f| f.to_string()),
            corpus.input_vocab.render(&d.etymon),
            corpus.output_vocab.render(&d.gold),
            corpus.output_vocab.render(&d.predicted),
            d.is_correct()
        );
    }
    out
}

/// Reads rows written by [`decoded_tsv`] back against `corpus`. The
/// etymon, gold form and language must match the indexed pair.
pub fn parse_decoded_tsv(corpus: &Corpus, text: &str) -> Result<Vec<Decoded>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |reason: String| CorpusError::Parse { line: i + 1, reason };
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, got {}", cols.len())));
        }
        let index: usize = cols[0].parse().map_err(|_| err(format!("bad index {:?}", cols[0])))?;
        let pair = corpus
            .pairs
            .get(index)
            .ok_or_else(|| err(format!("index {index} outside the corpus")))?;
        let language = corpus.languages.id(cols[1]);
        let etymon = corpus.input_vocab.encode(cols[3]).map_err(|e| err(e.to_string()))?;
        let gold = corpus.output_vocab.encode(cols[4]).map_err(|e| err(e.to_string()))?;
        if language != Some(pair.language) || etymon != pair.etymon || gold != pair.reflex {
            return Err(err(format!("row does not match corpus pair {index}")));
        }
        let predicted = corpus.output_vocab.encode(cols[5]).map_err(|e| err(e.to_string()))?;
        out.push(Decoded {
            index,
            language: pair.language,
            etymon,
            gold,
            predicted,
        });
    }
    Ok(out)
}

/// Names of the parameter tensors, for progress and debugging output.
pub fn parameter_names() -> &'static [&'static str] {
    Parameters::NAMES
}
