//! Language-conditioned encoder–decoder with exact hard monotonic attention.
//!
//! Each etymon segment is fused with a learned language vector, encoded
//! by a single-layer LSTM, and decoded one output segment at a time. At
//! every output step exactly one input position is attended to, never
//! behind the previous one; training marginalizes over all such
//! alignments with the dynamic program in [`Lattice`].

mod cell;
mod checkpoint;
mod emission;
mod lattice;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CognatePair, Corpus, LanguageId, LanguageTable, Vocabulary, BOS, EOS, PAD};
use crate::tensor::{glorot_init, seeded_rng, Tape, Tensor, TensorError, Var};

pub use checkpoint::CheckpointError;
pub use lattice::{AlignmentPath, Lattice};
use cell::LstmLayer;
use emission::GoldEmission;
use lattice::MonotonicAlignment;

/// How the raw language parameters are read before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Real-valued, used as is.
    Dense,
    /// Squashed into (0, 1).
    Sigmoid,
    /// Binary `{0, 1}` forward, straight-through identity backward.
    St,
}

impl EmbeddingMode {
    pub const ALL: [EmbeddingMode; 3] = [EmbeddingMode::Dense, EmbeddingMode::Sigmoid, EmbeddingMode::St];

    pub fn activate(self, x: f64) -> f64 {
        match self {
            EmbeddingMode::Dense => x,
            EmbeddingMode::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            EmbeddingMode::St => f64::from(u8::from(x >= 0.0)),
        }
    }

    fn apply(self, tape: &mut Tape<'_>, v: Var) -> Var {
        match self {
            EmbeddingMode::Dense => v,
            EmbeddingMode::Sigmoid => tape.sigmoid(v),
            EmbeddingMode::St => tape.heaviside_st(v),
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Dense => "dense",
            EmbeddingMode::Sigmoid => "sigmoid",
            EmbeddingMode::St => "st",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(EmbeddingMode::Dense),
            "sigmoid" => Ok(EmbeddingMode::Sigmoid),
            "st" | "straight-through" => Ok(EmbeddingMode::St),
            _ => Err(ModelError::Argument(format!("unknown embedding mode {s:?} (dense, sigmoid, st)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: EmbeddingMode,
    pub lang_dim: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// Longest decoded output, EOS excluded.
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: EmbeddingMode::Dense,
            lang_dim: 128,
            emb_dim: 128,
            hidden_dim: 256,
            max_decode_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown language {0}")]
    UnknownLanguage(String),
    #[error("{which} segment id {id} is outside the vocabulary of {size}")]
    OutOfVocabulary { which: &'static str, id: usize, size: usize },
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

macro_rules! parameter_set {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// Every trainable tensor of the model.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Parameters {
            $(pub $field: Tensor,)*
        }

        #[derive(Clone, Copy)]
        struct Bound {
            $($field: Var,)*
        }

        impl Parameters {
            /// Stable names, in the order of [`Parameters::tensors`].
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),*]
            }

            fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
                Bound { $($field: tape.param(&self.$field),)* }
            }
        }

        impl Bound {
            fn vars(&self) -> Vec<Var> {
                vec![$(self.$field),*]
            }
        }
    };
}

// The fusion layer is split by input block: `[onehot(x); z]·W` is
// `W_symbol[x] + z·W_language`, which avoids materializing one-hot rows.
parameter_set! {
    language_embedding => "lang_embedding",
    fusion_symbol => "fusion.symbol",
    fusion_language => "fusion.language",
    enc_w_ih => "enc.w_ih",
    enc_w_hh => "enc.w_hh",
    enc_bias => "enc.bias",
    dec_embedding => "dec.embedding",
    dec_w_ih => "dec.w_ih",
    dec_w_hh => "dec.w_hh",
    dec_bias => "dec.bias",
    attention => "attn.bilinear",
    emit_dec => "emit.w_dec",
    emit_enc => "emit.w_enc",
    emit_bias => "emit.bias",
    out_weight => "out.weight",
    out_bias => "out.bias",
}

impl Parameters {
    fn init(config: &ModelConfig, languages: usize, v_in: usize, v_out: usize) -> Result<Self, TensorError> {
        let mut rng = seeded_rng(config.seed);
        let (dl, de, h) = (config.lang_dim, config.emb_dim, config.hidden_dim);
        let mut g = |shape: &[usize]| glorot_init(shape, &mut rng);
        let lstm_bias = || {
            // forget gate starts open
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].fill(1.0);
            Tensor::from_vec(b, &[4 * h])
        };
        Ok(Self {
            language_embedding: g(&[languages, dl]),
            fusion_symbol: g(&[v_in, de]),
            fusion_language: g(&[dl, de]),
            enc_w_ih: g(&[de, 4 * h]),
            enc_w_hh: g(&[h, 4 * h]),
            enc_bias: lstm_bias()?,
            dec_embedding: g(&[v_out, de]),
            dec_w_ih: g(&[de, 4 * h]),
            dec_w_hh: g(&[h, 4 * h]),
            dec_bias: lstm_bias()?,
            attention: g(&[h, h]),
            emit_dec: g(&[h, h]),
            emit_enc: g(&[h, h]),
            emit_bias: Tensor::zeros(&[h]),
            out_weight: g(&[h, v_out]),
            out_bias: Tensor::zeros(&[v_out]),
        })
    }

    pub fn total_size(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// A greedy decode: the emitted symbols (EOS excluded) and whether EOS
/// was chosen before the length cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub symbols: Vec<usize>,
    pub terminated: bool,
}

/// Where the language vector for a forward pass comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LanguageInput<'a> {
    /// The learned embedding of a known language, read through the mode.
    Id(LanguageId),
    /// An already activated vector, fed to the fusion layer unchanged.
    Activated(&'a [f64]),
}

impl From<LanguageId> for LanguageInput<'_> {
    fn from(id: LanguageId) -> Self {
        LanguageInput::Id(id)
    }
}

struct Encoded {
    /// `[B, J, H]`
    states: Var,
    h: Var,
    c: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    config: ModelConfig,
    input_vocab: Vocabulary,
    output_vocab: Vocabulary,
    languages: LanguageTable,
    params: Parameters,
}

impl TransducerModel {
    /// Fresh model over the corpus vocabularies, seeded by `config.seed`.
    pub fn new(config: ModelConfig, corpus: &Corpus) -> Result<Self, ModelError> {
        Self::with_vocabularies(
            config,
            corpus.input_vocab.clone(),
            corpus.output_vocab.clone(),
            corpus.languages.clone(),
        )
    }

    pub fn with_vocabularies(
        config: ModelConfig,
        input_vocab: Vocabulary,
        output_vocab: Vocabulary,
        languages: LanguageTable,
    ) -> Result<Self, ModelError> {
        if config.lang_dim == 0 || config.emb_dim == 0 || config.hidden_dim == 0 {
            return Err(ModelError::Argument("model dimensions must be positive".into()));
        }
        if input_vocab.is_empty() || languages.is_empty() || output_vocab.len() <= output_vocab.reserved() {
            return Err(ModelError::Argument("vocabularies and language table must be non-empty".into()));
        }
        let params = Parameters::init(&config, languages.len(), input_vocab.len(), output_vocab.len())?;
        Ok(Self {
            config,
            input_vocab,
            output_vocab,
            languages,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.config.mode
    }

    pub fn input_vocab(&self) -> &Vocabulary {
        &self.input_vocab
    }

    pub fn output_vocab(&self) -> &Vocabulary {
        &self.output_vocab
    }

    pub fn languages(&self) -> &LanguageTable {
        &self.languages
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn language(&self, name: &str) -> Result<LanguageId, ModelError> {
        self.languages
            .id(name)
            .ok_or_else(|| ModelError::UnknownLanguage(name.to_string()))
    }

    /// The language vector as the fusion layer sees it.
    pub fn read_language_embedding(&self, language: LanguageId) -> Result<Vec<f64>, ModelError> {
        self.check_language(language)?;
        let mode = self.config.mode;
        Ok(self
            .params
            .language_embedding
            .row(language.0)
            .iter()
            .map(|&x| mode.activate(x))
            .collect())
    }

    /// Activated embeddings of every language, `[L, D_lang]`.
    pub fn activated_embeddings(&self) -> Tensor {
        let mode = self.config.mode;
        let data = self.params.language_embedding.data().iter().map(|&x| mode.activate(x)).collect();
        Tensor::from_vec(data, self.params.language_embedding.shape()).expect("same shape")
    }

    fn check_language(&self, language: LanguageId) -> Result<(), ModelError> {
        if language.0 >= self.languages.len() {
            return Err(ModelError::UnknownLanguage(format!("#{}", language.0)));
        }
        Ok(())
    }

    fn check_input(&self, x: &[usize]) -> Result<(), ModelError> {
        if x.is_empty() {
            return Err(ModelError::EmptySequence("input"));
        }
        let size = self.input_vocab.len();
        match x.iter().find(|&&i| i >= size) {
            Some(&id) => Err(ModelError::OutOfVocabulary { which: "input", id, size }),
            None => Ok(()),
        }
    }

    fn check_target(&self, y: &[usize]) -> Result<(), ModelError> {
        let size = self.output_vocab.len();
        let reserved = self.output_vocab.reserved();
        match y.iter().find(|&&i| i >= size || i < reserved) {
            Some(&id) => Err(ModelError::OutOfVocabulary { which: "output", id, size }),
            None => Ok(()),
        }
    }

    fn check_language_input(&self, l: &LanguageInput<'_>) -> Result<(), ModelError> {
        match l {
            LanguageInput::Id(id) => self.check_language(*id),
            LanguageInput::Activated(v) if v.len() != self.config.lang_dim => Err(ModelError::Argument(format!(
                "language vector has {} entries, model expects {}",
                v.len(),
                self.config.lang_dim
            ))),
            LanguageInput::Activated(_) => Ok(()),
        }
    }

    /// `[B, D_lang]` language rows for a batch.
    fn language_rows<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        bound: &Bound,
        langs: &[LanguageInput<'_>],
    ) -> Result<Var, ModelError> {
        let dl = self.config.lang_dim;
        let ids: Vec<usize> = langs
            .iter()
            .map(|l| match l {
                LanguageInput::Id(id) => id.0,
                LanguageInput::Activated(_) => 0,
            })
            .collect();
        let learned = langs.iter().any(|l| matches!(l, LanguageInput::Id(_))).then(|| {
            let table = self.config.mode.apply(tape, bound.language_embedding);
            tape.embedding(table, &ids)
        });
        if langs.iter().all(|l| matches!(l, LanguageInput::Id(_))) {
            return Ok(learned.expect("at least one id")?);
        }
        let mut given = Vec::with_capacity(langs.len() * dl);
        for l in langs {
            match l {
                LanguageInput::Activated(v) => given.extend_from_slice(v),
                LanguageInput::Id(_) => given.extend(std::iter::repeat_n(0.0, dl)),
            }
        }
        let given = tape.constant(Tensor::from_vec(given, &[langs.len(), dl])?);
        match learned {
            None => Ok(given),
            Some(learned) => {
                let mask: Vec<bool> = langs.iter().map(|l| matches!(l, LanguageInput::Id(_))).collect();
                Ok(tape.select_rows(&mask, learned?, given)?)
            }
        }
    }

    /// Runs an LSTM over `x_gates [B, T, 4H]`; returns the states
    /// `[B, T, H]` and the final `h`, `c`.
    #[allow(clippy::too_many_arguments)]
    fn run_lstm(
        &self,
        tape: &mut Tape<'_>,
        x_gates: Var,
        h: Var,
        c: Var,
        w_hh: Var,
        bias: Var,
        lens: Vec<usize>,
    ) -> Result<(Var, Var, Var), TensorError> {
        let (hd, b) = (self.config.hidden_dim, lens.len());
        let steps = tape.value(x_gates).shape()[1];
        let out = tape.custom(Box::new(LstmLayer::new(lens)), &[x_gates, h, c, w_hh, bias])?;
        let flat = tape.reshape(out, &[b, (steps + 2) * hd])?;
        let states = tape.slice_last(flat, 0, steps * hd)?;
        let states = tape.reshape(states, &[b, steps, hd])?;
        let h = tape.slice_last(flat, steps * hd, (steps + 1) * hd)?;
        let c = tape.slice_last(flat, (steps + 1) * hd, (steps + 2) * hd)?;
        Ok((states, h, c))
    }

    fn encode_batch<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        bound: &Bound,
        inputs: &[&[usize]],
        langs: &[LanguageInput<'_>],
    ) -> Result<Encoded, ModelError> {
        let (b, hd) = (inputs.len(), self.config.hidden_dim);
        let jmax = inputs.iter().map(|x| x.len()).max().unwrap_or(0);
        let z = self.language_rows(tape, bound, langs)?;
        // input-to-gate contributions: symbol part per step, language part per row
        let sym = tape.matmul(bound.fusion_symbol, bound.enc_w_ih)?;
        let lang = tape.matmul(z, bound.fusion_language)?;
        let lang = tape.matmul(lang, bound.enc_w_ih)?;
        let h = tape.constant(Tensor::zeros(&[b, hd]));
        let c = tape.constant(Tensor::zeros(&[b, hd]));
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|x| (0..jmax).map(|t| x.get(t).copied().unwrap_or(0)))
            .collect();
        let rows: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, jmax)).collect();
        let gates = tape.embedding(sym, &ids)?;
        let lang = tape.embedding(lang, &rows)?;
        let gates = tape.add(gates, lang)?;
        let gates = tape.reshape(gates, &[b, jmax, 4 * hd])?;
        let lens = inputs.iter().map(|x| x.len()).collect();
        let (states, h, c) = self.run_lstm(tape, gates, h, c, bound.enc_w_hh, bound.enc_bias, lens)?;
        Ok(Encoded { states, h, c })
    }

    /// Decoder states for teacher-forced previous symbols, `[B, T, H]`.
    fn decode_states(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        enc: &Encoded,
        prev: &[Vec<usize>],
    ) -> Result<Var, ModelError> {
        let tmax = prev[0].len();
        let table = tape.matmul(bound.dec_embedding, bound.dec_w_ih)?;
        let ids: Vec<usize> = prev.iter().flatten().copied().collect();
        let gates = tape.embedding(table, &ids)?;
        let gates = tape.reshape(gates, &[prev.len(), tmax, 4 * self.config.hidden_dim])?;
        let lens = vec![tmax; prev.len()];
        let (states, _, _) = self.run_lstm(tape, gates, enc.h, enc.c, bound.dec_w_hh, bound.dec_bias, lens)?;
        Ok(states)
    }

    /// Attention scores `[B, T, J]` and emission log-softmax
    /// `[B·T·J, V_out]` for decoder states `[B, T, H]`.
    /// `S[b,t,j] = dec[b,t] · W_a · enc[b,j]`
    fn attention_scores(&self, tape: &mut Tape<'_>, bound: &Bound, enc: Var, dec: Var) -> Result<Var, ModelError> {
        let hd = self.config.hidden_dim;
        let (b, j) = (tape.value(enc).shape()[0], tape.value(enc).shape()[1]);
        let enc_flat = tape.reshape(enc, &[b * j, hd])?;
        let keys = tape.matmul(enc_flat, bound.attention)?;
        let keys = tape.reshape(keys, &[b, j, hd])?;
        Ok(tape.batch_matmul_nt(dec, keys)?)
    }

    fn scores_and_emissions(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        enc: Var,
        dec: Var,
    ) -> Result<(Var, Var), ModelError> {
        let hd = self.config.hidden_dim;
        let (b, j) = (tape.value(enc).shape()[0], tape.value(enc).shape()[1]);
        let t = tape.value(dec).shape()[1];
        let enc_flat = tape.reshape(enc, &[b * j, hd])?;
        let dec_flat = tape.reshape(dec, &[b * t, hd])?;
        let scores = self.attention_scores(tape, bound, enc, dec)?;
        let dp = tape.matmul(dec_flat, bound.emit_dec)?;
        let dp = tape.reshape(dp, &[b, t, hd])?;
        let ep = tape.matmul(enc_flat, bound.emit_enc)?;
        let ep = tape.reshape(ep, &[b, j, hd])?;
        let u = tape.pairwise_add(dp, ep)?;
        let u = tape.add_bias(u, bound.emit_bias)?;
        let u = tape.tanh(u);
        let u = tape.reshape(u, &[b * t * j, hd])?;
        let logits = tape.matmul(u, bound.out_weight)?;
        let logits = tape.add_bias(logits, bound.out_bias)?;
        Ok((scores, tape.log_softmax(logits)))
    }

    /// Builds the batch log-likelihood on `tape`. `targets` must already
    /// end with EOS when it is to be scored. Returns the per-example
    /// log-likelihoods `[B]`, their emission/score tensors and the
    /// bound parameter handles.
    fn batch_log_likelihood<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: &[&[usize]],
        targets: &[Vec<usize>],
        langs: &[LanguageInput<'_>],
    ) -> Result<(Var, Var, Var, Bound), ModelError> {
        let bound = self.params.bind(tape);
        let b = inputs.len();
        let tmax = targets.iter().map(Vec::len).max().unwrap_or(0);
        let jmax = inputs.iter().map(|x| x.len()).max().unwrap_or(0);
        let enc = self.encode_batch(tape, &bound, inputs, langs)?;
        let prev: Vec<Vec<usize>> = targets
            .iter()
            .map(|y| {
                let mut p = Vec::with_capacity(tmax);
                p.push(BOS);
                p.extend_from_slice(&y[..y.len() - 1]);
                p.resize(tmax, PAD);
                p
            })
            .collect();
        let dec = self.decode_states(tape, &bound, &enc, &prev)?;
        let scores = self.attention_scores(tape, &bound, enc.states, dec)?;
        let hd = self.config.hidden_dim;
        let enc_flat = tape.reshape(enc.states, &[b * jmax, hd])?;
        let dec_flat = tape.reshape(dec, &[b * tmax, hd])?;
        let dp = tape.matmul(dec_flat, bound.emit_dec)?;
        let ep = tape.matmul(enc_flat, bound.emit_enc)?;
        let gold = targets
            .iter()
            .flat_map(|y| (0..tmax).map(|t| y.get(t).copied().unwrap_or(PAD)))
            .collect();
        let live = inputs.iter().zip(targets).map(|(x, y)| (x.len(), y.len())).collect();
        let emit = tape.custom(
            Box::new(GoldEmission::new(tmax, jmax, live, gold)),
            &[dp, ep, bound.emit_bias, bound.out_weight, bound.out_bias],
        )?;
        let lens = inputs.iter().zip(targets).map(|(x, y)| (x.len(), y.len())).collect();
        let ll = tape.custom(Box::new(MonotonicAlignment { lens }), &[emit, scores])?;
        Ok((ll, emit, scores, bound))
    }

    fn with_eos(y: &[usize]) -> Vec<usize> {
        let mut t = y.to_vec();
        t.push(EOS);
        t
    }

    /// Records the training loss `−Σ log p(y|x,ℓ) / normalizer` for
    /// `batch` on `tape` and returns it with the parameter handles in
    /// [`Parameters::NAMES`] order.
    pub fn loss_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        batch: &[&CognatePair],
        normalizer: f64,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Argument("empty batch".into()));
        }
        for p in batch {
            self.check_input(&p.etymon)?;
            if p.reflex.is_empty() {
                return Err(ModelError::EmptySequence("output"));
            }
            self.check_target(&p.reflex)?;
            self.check_language(p.language)?;
        }
        let inputs: Vec<&[usize]> = batch.iter().map(|p| p.etymon.as_slice()).collect();
        let targets: Vec<Vec<usize>> = batch.iter().map(|p| Self::with_eos(&p.reflex)).collect();
        let langs: Vec<LanguageInput<'_>> = batch.iter().map(|p| LanguageInput::Id(p.language)).collect();
        let (ll, _, _, bound) = self.batch_log_likelihood(tape, &inputs, &targets, &langs)?;
        let total = tape.sum(ll);
        Ok((tape.scale(total, -1.0 / normalizer), bound.vars()))
    }

    /// Mean per-token training loss of `batch` with parameter gradients,
    /// in [`Parameters::NAMES`] order.
    pub fn loss_and_gradients(&self, batch: &[&CognatePair]) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let tokens: usize = batch.iter().map(|p| p.reflex.len() + 1).sum();
        let mut tape = Tape::new();
        let (loss, vars) = self.loss_on_tape(&mut tape, batch, tokens as f64)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let out = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, out))
    }

    /// Emission and score tables for `x → targets` exactly as scored
    /// (no EOS is appended).
    pub fn lattice_for_targets(
        &self,
        x: &[usize],
        targets: &[usize],
        language: LanguageInput<'_>,
    ) -> Result<Lattice, ModelError> {
        self.check_input(x)?;
        self.check_language_input(&language)?;
        if targets.is_empty() {
            return Err(ModelError::EmptySequence("output"));
        }
        let size = self.output_vocab.len();
        if let Some(&id) = targets.iter().find(|&&i| i >= size) {
            return Err(ModelError::OutOfVocabulary { which: "output", id, size });
        }
        let mut tape = Tape::new();
        let (_, emit, scores, _) = self.batch_log_likelihood(&mut tape, &[x], &[targets.to_vec()], &[language])?;
        Ok(Lattice::new(
            targets.len(),
            x.len(),
            tape.value(emit).data().to_vec(),
            tape.value(scores).data().to_vec(),
        ))
    }

    /// Lattice for `y` followed by EOS.
    pub fn alignment_lattice(&self, x: &[usize], y: &[usize], language: LanguageId) -> Result<Lattice, ModelError> {
        self.check_target(y)?;
        self.lattice_for_targets(x, &Self::with_eos(y), LanguageInput::Id(language))
    }

    /// `log p(y | x, ℓ)` including the final EOS, summed over alignments.
    pub fn sequence_log_likelihood(&self, x: &[usize], y: &[usize], language: LanguageId) -> Result<f64, ModelError> {
        Ok(self.alignment_lattice(x, y, language)?.log_likelihood())
    }

    /// Most probable alignment of the symbols of `y` (EOS step omitted).
    pub fn viterbi_alignment(&self, x: &[usize], y: &[usize], language: LanguageId) -> Result<AlignmentPath, ModelError> {
        if y.is_empty() {
            return Ok(AlignmentPath(Vec::new()));
        }
        let (mut path, _) = self.alignment_lattice(x, y, language)?.viterbi();
        path.0.truncate(y.len());
        Ok(path)
    }

    /// Encoder states for `x`, `[|x|, H]`.
    pub fn encode(&self, x: &[usize], language: LanguageInput<'_>) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        self.check_language_input(&language)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc = self.encode_batch(&mut tape, &bound, &[x], &[language])?;
        let states = tape.value(enc.states);
        Ok(Tensor::from_vec(states.data().to_vec(), &[x.len(), self.config.hidden_dim])?)
    }

    /// Greedy decoding under the exact predictive distribution.
    ///
    /// A posterior over the attended position is carried between steps.
    /// At each step the next symbol maximizes
    /// `Σ_j p(a_t = j | history) · p(v | a_t = j)`; ties go to the
    /// smaller id. Stops at EOS (not returned) or after `max_len`
    /// symbols.
    pub fn greedy_hypothesis(
        &self,
        x: &[usize],
        language: LanguageInput<'_>,
        max_len: usize,
    ) -> Result<Hypothesis, ModelError> {
        self.check_input(x)?;
        self.check_language_input(&language)?;
        let (jn, hd) = (x.len(), self.config.hidden_dim);
        let v_out = self.output_vocab.len();
        let reserved = self.output_vocab.reserved();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc = self.encode_batch(&mut tape, &bound, &[x], &[language])?;
        let table = tape.matmul(bound.dec_embedding, bound.dec_w_ih)?;
        let (mut h, mut c) = (enc.h, enc.c);
        let mut prev = BOS;
        let mut log_post: Option<Vec<f64>> = None;
        let mut out = Vec::new();
        loop {
            let gates = tape.embedding(table, &[prev])?;
            let gates = tape.reshape(gates, &[1, 1, 4 * hd])?;
            let dec;
            (dec, h, c) = self.run_lstm(&mut tape, gates, h, c, bound.dec_w_hh, bound.dec_bias, vec![1])?;
            let (scores, logp) = self.scores_and_emissions(&mut tape, &bound, enc.states, dec)?;
            let s = tape.value(scores).data();
            let lp = tape.value(logp).data();
            // log p(a_t = j | history)
            let log_pi: Vec<f64> = match &log_post {
                None => {
                    let z = crate::tensor::logsumexp(s);
                    s.iter().map(|v| v - z).collect()
                }
                Some(post) => {
                    let mut suffix = vec![0.0; jn];
                    let mut acc = f64::NEG_INFINITY;
                    for k in (0..jn).rev() {
                        acc = crate::tensor::logsumexp(&[acc, s[k]]);
                        suffix[k] = acc;
                    }
                    let mut pre = f64::NEG_INFINITY;
                    (0..jn)
                        .map(|j| {
                            pre = crate::tensor::logsumexp(&[pre, post[j] - suffix[j]]);
                            s[j] + pre
                        })
                        .collect()
                }
            };
            let mut best = (EOS, f64::NEG_INFINITY);
            for v in (EOS..v_out).filter(|&v| v == EOS || v >= reserved) {
                let terms: Vec<f64> = (0..jn).map(|j| log_pi[j] + lp[j * v_out + v]).collect();
                let score = crate::tensor::logsumexp(&terms);
                if score > best.1 {
                    best = (v, score);
                }
            }
            let v = best.0;
            if v == EOS {
                return Ok(Hypothesis { symbols: out, terminated: true });
            }
            if out.len() >= max_len {
                return Ok(Hypothesis { symbols: out, terminated: false });
            }
            out.push(v);
            let joint: Vec<f64> = (0..jn).map(|j| log_pi[j] + lp[j * v_out + v]).collect();
            let z = crate::tensor::logsumexp(&joint);
            log_post = Some(joint.iter().map(|a| a - z).collect());
            prev = v;
        }
    }

    /// Greedy decode with the configured length cap.
    pub fn greedy_decode(
        &self,
        x: &[usize],
        language: LanguageInput<'_>,
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        Ok(self.greedy_hypothesis(x, language, max_len)?.symbols)
    }

    pub fn decode(&self, x: &[usize], language: LanguageInput<'_>) -> Result<Vec<usize>, ModelError> {
        self.greedy_decode(x, language, self.config.max_decode_len)
    }
}

#[cfg(test)]
mod tests;
