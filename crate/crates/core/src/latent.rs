//! Probes of the language-embedding space: which binary dimensions are
//! used, what single-bit neighbours decode to, what random embeddings
//! decode to, and whether echo-forms keep their endings.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal};
use regex::Regex;
use thiserror::Error;

use crate::corpus::{split_token, LanguageId};
use crate::model::{EmbeddingMode, Hypothesis, LanguageInput, ModelError, TransducerModel};
use crate::tensor::{seeded_rng, Rng};

#[derive(Debug, Error)]
pub enum LatentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{what} needs a {expected} model, this one is {found}")]
    WrongMode {
        what: &'static str,
        expected: EmbeddingMode,
        found: EmbeddingMode,
    },
    #[error("invalid sampling regime: {0}")]
    Regime(String),
    #[error("cohort line {line}: {reason}")]
    Cohort { line: usize, reason: String },
    #[error("no etyma to decode")]
    NoEtyma,
}

fn require_mode(model: &TransducerModel, what: &'static str, expected: EmbeddingMode) -> Result<(), LatentError> {
    if model.mode() == expected {
        Ok(())
    } else {
        Err(LatentError::WrongMode {
            what,
            expected,
            found: model.mode(),
        })
    }
}

/// Binary activations of every language (rows) by dimension (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub languages: Vec<String>,
    pub cells: Vec<Vec<u8>>,
}

impl Heatmap {
    pub fn active_per_language(&self) -> Vec<usize> {
        self.cells.iter().map(|r| r.iter().filter(|&&v| v == 1).count()).collect()
    }

    /// Dimensions that are 0 for every language.
    pub fn inactive_dims(&self) -> Vec<usize> {
        let dims = self.cells.first().map_or(0, Vec::len);
        (0..dims).filter(|&d| self.cells.iter().all(|r| r[d] == 0)).collect()
    }

    /// Header `language, d0, d1, …`, one 0/1 row per language.
    pub fn to_tsv(&self) -> String {
        let dims = self.cells.first().map_or(0, Vec::len);
        let mut out = String::from("language");
        for d in 0..dims {
            let _ = write!(out, "\td{d}");
        }
        out.push('\n');
        for (name, row) in self.languages.iter().zip(&self.cells) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    /// `language, active` per row, then `*` with the globally inactive count.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("language\tactive\n");
        for (name, n) in self.languages.iter().zip(self.active_per_language()) {
            let _ = writeln!(out, "{name}\t{n}");
        }
        let _ = writeln!(out, "*inactive\t{}", self.inactive_dims().len());
        out
    }
}

pub fn activity_heatmap(model: &TransducerModel) -> Result<Heatmap, LatentError> {
    require_mode(model, "activity heatmap", EmbeddingMode::St)?;
    let mut languages = Vec::new();
    let mut cells = Vec::new();
    for (id, name) in model.languages().iter() {
        languages.push(name.to_string());
        let z = model.read_language_embedding(id)?;
        cells.push(z.iter().map(|&v| u8::from(v >= 0.5)).collect());
    }
    Ok(Heatmap { languages, cells })
}

/// Decodes of one etymon with each bit of a language's embedding flipped.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub language: String,
    pub etymon: Vec<usize>,
    pub base: Vec<usize>,
    /// `(flipped dimension, decoded output)`, one per dimension
    pub neighbors: Vec<(usize, Vec<usize>)>,
}

impl PerturbationReport {
    pub fn unique_outputs(&self) -> usize {
        self.neighbors.iter().map(|(_, o)| o).collect::<BTreeSet<_>>().len()
    }

    pub fn to_tsv(&self, model: &TransducerModel) -> String {
        let out_vocab = model.output_vocab();
        let mut out = String::from("dimension\toutput\tsame_as_base\n");
        for (d, o) in &self.neighbors {
            let _ = writeln!(out, "{d}\t{}\t{}", out_vocab.render(o), o == &self.base);
        }
        out
    }
}

pub fn nearest_neighbors(
    model: &TransducerModel,
    language: LanguageId,
    etymon: &[usize],
) -> Result<PerturbationReport, LatentError> {
    require_mode(model, "nearest neighbours", EmbeddingMode::St)?;
    let z = model.read_language_embedding(language)?;
    let base = model.decode(etymon, LanguageInput::Activated(&z))?;
    let mut neighbors = Vec::with_capacity(z.len());
    let mut flipped = z.clone();
    for d in 0..z.len() {
        flipped[d] = 1.0 - z[d];
        neighbors.push((d, model.decode(etymon, LanguageInput::Activated(&flipped))?));
        flipped[d] = z[d];
    }
    Ok(PerturbationReport {
        language: model.languages().name(language).to_string(),
        etymon: etymon.to_vec(),
        base,
        neighbors,
    })
}

/// Distribution family for random language vectors, drawn directly in
/// the activated space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Gaussian { sigma: f64 },
    Beta { alpha: f64 },
    /// independent Bernoulli(p) bits
    Binomial { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRegime {
    pub family: Family,
    pub samples: usize,
}

impl SamplingRegime {
    pub fn new(family: Family) -> Result<Self, LatentError> {
        let r = Self { family, samples: 100 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        let ok = match self.family {
            Family::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            Family::Beta { alpha } => alpha > 0.0 && alpha.is_finite(),
            Family::Binomial { p } => p > 0.0 && p < 1.0,
        };
        if !ok {
            return Err(LatentError::Regime(format!("parameter out of range in {self}")));
        }
        if self.samples == 0 {
            return Err(LatentError::Regime("zero samples".into()));
        }
        Ok(())
    }

    /// The embedding mode whose activated space this family lives in.
    pub fn mode(&self) -> EmbeddingMode {
        match self.family {
            Family::Gaussian { .. } => EmbeddingMode::Dense,
            Family::Beta { .. } => EmbeddingMode::Sigmoid,
            Family::Binomial { .. } => EmbeddingMode::St,
        }
    }

    pub fn draw(&self, dim: usize, rng: &mut Rng) -> Vec<f64> {
        match self.family {
            Family::Gaussian { sigma } => {
                let n = Normal::new(0.0, sigma).expect("validated sigma");
                (0..dim).map(|_| n.sample(rng)).collect()
            }
            Family::Beta { alpha } => {
                let b = Beta::new(alpha, alpha).expect("validated alpha");
                (0..dim).map(|_| b.sample(rng)).collect()
            }
            Family::Binomial { p } => (0..dim).map(|_| f64::from(u8::from(rng.random_bool(p)))).collect(),
        }
    }
}

impl fmt::Display for SamplingRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Family::Beta { alpha } => write!(f, "beta:{alpha}"),
            Family::Binomial { p } => write!(f, "binomial:{p}"),
        }
    }
}

/// `gaussian:SIGMA`, `beta:ALPHA` or `binomial:P`, 100 samples.
impl FromStr for SamplingRegime {
    type Err = LatentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, value) = s
            .split_once(':')
            .ok_or_else(|| LatentError::Regime(format!("{s:?}: expected FAMILY:VALUE")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| LatentError::Regime(format!("{s:?}: bad number")))?;
        let family = match name.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Family::Gaussian { sigma: v },
            "beta" => Family::Beta { alpha: v },
            "binomial" | "bernoulli" => Family::Binomial { p: v },
            other => return Err(LatentError::Regime(format!("unknown family {other:?}"))),
        };
        Self::new(family)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingReport {
    pub regime: SamplingRegime,
    /// per etymon: the etymon and one hypothesis per sample
    pub outputs: Vec<(Vec<usize>, Vec<Hypothesis>)>,
}

impl SamplingReport {
    pub fn unique_counts(&self) -> Vec<usize> {
        self.outputs
            .iter()
            .map(|(_, hs)| hs.iter().map(|h| &h.symbols).collect::<BTreeSet<_>>().len())
            .collect()
    }

    pub fn mean_unique(&self) -> f64 {
        let c = self.unique_counts();
        c.iter().sum::<usize>() as f64 / c.len().max(1) as f64
    }

    pub fn all_terminated(&self) -> bool {
        self.outputs.iter().flat_map(|(_, hs)| hs).all(|h| h.terminated)
    }

    /// `etymon, unique, terminated` per etymon, then a `*` mean row.
    pub fn to_tsv(&self, model: &TransducerModel) -> String {
        let mut out = String::from("etymon\tunique\tterminated\n");
        for ((x, hs), n) in self.outputs.iter().zip(self.unique_counts()) {
            let done = hs.iter().filter(|h| h.terminated).count();
            let _ = writeln!(out, "{}\t{n}\t{done}/{}", model.input_vocab().render(x), hs.len());
        }
        let _ = writeln!(out, "*\t{}\t", self.mean_unique());
        out
    }

    /// `etymon, sample, output` for every decode.
    pub fn outputs_tsv(&self, model: &TransducerModel) -> String {
        let mut out = String::from("etymon\tsample\toutput\n");
        for (x, hs) in &self.outputs {
            let xs = model.input_vocab().render(x);
            for (i, h) in hs.iter().enumerate() {
                let _ = writeln!(out, "{xs}\t{i}\t{}", model.output_vocab().render(&h.symbols));
            }
        }
        out
    }
}

/// Decodes every etymon under `regime.samples` random embeddings (the
/// same draws for every etymon).
pub fn sample_latent(
    model: &TransducerModel,
    regime: &SamplingRegime,
    etyma: &[Vec<usize>],
    seed: u64,
) -> Result<SamplingReport, LatentError> {
    regime.validate()?;
    require_mode(model, "this sampling family", regime.mode())?;
    if etyma.is_empty() {
        return Err(LatentError::NoEtyma);
    }
    let mut rng = seeded_rng(seed);
    let dim = model.config().lang_dim;
    let draws: Vec<Vec<f64>> = (0..regime.samples).map(|_| regime.draw(dim, &mut rng)).collect();
    let max_len = model.config().max_decode_len;
    let outputs = etyma
        .iter()
        .map(|x| {
            let hs = draws
                .iter()
                .map(|z| model.greedy_hypothesis(x, LanguageInput::Activated(z), max_len))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((x.clone(), hs))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(SamplingReport {
        regime: *regime,
        outputs,
    })
}

/// A base etymon and its variants differing only in the first segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoCohort {
    /// base first, then the variants
    pub members: Vec<Vec<String>>,
}

impl EchoCohort {
    /// Replaces the first segment of `base` with each substitute; keeps the
    /// base, drops duplicates and any member whose space-joined form
    /// matches `exclude`.
    pub fn build(base: &[String], substitutes: &[String], exclude: Option<&Regex>) -> Self {
        let mut members: Vec<Vec<String>> = Vec::new();
        if base.is_empty() {
            return Self { members };
        }
        let candidates = std::iter::once(base.to_vec()).chain(substitutes.iter().map(|s| {
            let mut v = base.to_vec();
            v[0] = s.clone();
            v
        }));
        for c in candidates {
            let text = c.join(" ");
            if exclude.is_some_and(|re| re.is_match(&text)) || members.contains(&c) {
                continue;
            }
            members.push(c);
        }
        Self { members }
    }
}

/// One cohort per line: `base segments TAB substitutes TAB exclusion regex`.
/// The regex column is optional; `#` starts a comment line.
pub fn parse_cohorts(text: &str) -> Result<Vec<EchoCohort>, LatentError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(LatentError::Cohort {
                line: line_no,
                reason: format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let seg = |s: &str| -> Vec<String> {
            s.split_whitespace()
                .flat_map(split_token)
                .map(|g| g.symbol().to_string())
                .collect()
        };
        let base = seg(cols[0]);
        if base.is_empty() {
            return Err(LatentError::Cohort {
                line: line_no,
                reason: "empty base etymon".into(),
            });
        }
        let subs: Vec<String> = cols[1].split_whitespace().map(str::to_string).collect();
        let exclude = match cols.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            Some(pattern) => Some(Regex::new(pattern).map_err(|e| LatentError::Cohort {
                line: line_no,
                reason: e.to_string(),
            })?),
            None => None,
        };
        out.push(EchoCohort::build(&base, &subs, exclude.as_ref()));
    }
    Ok(out)
}

/// Longest common suffix over the mean of the two lengths (0 when both
/// are empty).
pub fn final_agreement<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    suffix as f64 / ((a.len() + b.len()) as f64 / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoRow {
    pub p: f64,
    pub pairs: usize,
    pub agreeing: usize,
    /// every decode ended with EOS
    pub terminated: bool,
}

impl EchoRow {
    pub fn proportion(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.agreeing as f64 / self.pairs as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoReport {
    pub rows: Vec<EchoRow>,
    /// cohorts with fewer than two members
    pub skipped: usize,
}

impl EchoReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("p\tpairs\tagreeing\tproportion\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.p, r.pairs, r.agreeing, r.proportion());
        }
        out
    }
}

/// For each Bernoulli density `p`, decodes every cohort member under a
/// fresh random binary embedding, strips suprasegmentals, and counts
/// the within-cohort output pairs whose final agreement exceeds 0.5.
pub fn echo_experiment(
    model: &TransducerModel,
    cohorts: &[EchoCohort],
    ps: &[f64],
    seed: u64,
) -> Result<EchoReport, LatentError> {
    require_mode(model, "echo experiment", EmbeddingMode::St)?;
    let usable: Vec<Vec<Vec<usize>>> = cohorts
        .iter()
        .filter(|c| c.members.len() >= 2)
        .map(|c| {
            c.members
                .iter()
                .map(|m| model.input_vocab().encode(&m.join(" ")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()
        .map_err(|e| LatentError::Cohort {
            line: 0,
            reason: e.to_string(),
        })?;
    let skipped = cohorts.len() - usable.len();
    let dim = model.config().lang_dim;
    let max_len = model.config().max_decode_len;
    let out_vocab = model.output_vocab();
    let mut rows = Vec::new();
    let mut rng = seeded_rng(seed);
    for &p in ps {
        let regime = SamplingRegime::new(Family::Binomial { p })?;
        let mut row = EchoRow {
            p,
            pairs: 0,
            agreeing: 0,
            terminated: true,
        };
        for members in &usable {
            let mut outs = Vec::with_capacity(members.len());
            for x in members {
                let z = regime.draw(dim, &mut rng);
                let h = model.greedy_hypothesis(x, LanguageInput::Activated(&z), max_len)?;
                row.terminated &= h.terminated;
                let stripped: Vec<usize> = h
                    .symbols
                    .into_iter()
                    .filter(|&v| !out_vocab.segment(v).is_suprasegmental())
                    .collect();
                outs.push(stripped);
            }
            for i in 0..outs.len() {
                for j in i + 1..outs.len() {
                    let r = final_agreement(&outs[i], &outs[j]);
                    debug_assert!((0.0..=1.0).contains(&r));
                    row.pairs += 1;
                    row.agreeing += usize::from(r > 0.5);
                }
            }
        }
        rows.push(row);
    }
    Ok(EchoReport { rows, skipped })
}

/// Every etymon string in `model`'s input vocabulary order of first use,
/// for experiments that want "some etyma": the first `n` distinct ones.
pub fn distinct_etyma(corpus: &crate::corpus::Corpus, n: usize) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    corpus
        .pairs
        .iter()
        .filter(|p| seen.insert(p.etymon.clone()))
        .take(n)
        .map(|p| p.etymon.clone())
        .collect()
}
