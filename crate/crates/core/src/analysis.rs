//! Alignment-based sound-change extraction and error classification.
//!
//! A rule maps one etymon segment to the (possibly empty) group of output
//! segments the Viterbi alignment attaches to it, regardless of
//! environment. Each wrong prediction is broken into such rules; rules
//! missing from the gold alignment of the same pair are the erroneous
//! edits, classified by where else they are attested.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{CognatePair, Corpus, LanguageId};
use crate::model::{AlignmentPath, ModelError, TransducerModel};
use crate::training::Decoded;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("alignment of length {path} does not match an output of length {output}")]
    BadAlignment { path: usize, output: usize },
    #[error("models were evaluated on different held-out pairs")]
    MismatchedRecords,
    #[error("no models to compare")]
    NoModels,
}

/// `source → target`, target possibly empty (deletion).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SoundChangeRule {
    pub source: usize,
    pub target: Vec<usize>,
}

/// One rule per input position, in input order.
pub fn rules_from_alignment(x: &[usize], y: &[usize], path: &AlignmentPath) -> Result<Vec<SoundChangeRule>, AnalysisError> {
    if path.0.len() != y.len() || path.0.iter().any(|&j| j >= x.len()) || !path.is_monotone() {
        return Err(AnalysisError::BadAlignment {
            path: path.0.len(),
            output: y.len(),
        });
    }
    let mut rules: Vec<SoundChangeRule> = x
        .iter()
        .map(|&s| SoundChangeRule {
            source: s,
            target: Vec::new(),
        })
        .collect();
    for (&sym, &j) in y.iter().zip(&path.0) {
        rules[j].target.push(sym);
    }
    Ok(rules)
}

/// Concatenated rule targets; inverts [`rules_from_alignment`].
pub fn reconstruct(rules: &[SoundChangeRule]) -> Vec<usize> {
    rules.iter().flat_map(|r| r.target.iter().copied()).collect()
}

/// Rules for `x → y` under the model's most probable alignment.
pub fn pair_rules(
    model: &TransducerModel,
    x: &[usize],
    y: &[usize],
    language: LanguageId,
) -> Result<Vec<SoundChangeRule>, AnalysisError> {
    let path = model.viterbi_alignment(x, y, language)?;
    rules_from_alignment(x, y, &path)
}

/// Attested rules per language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleInventory {
    by_language: BTreeMap<LanguageId, BTreeSet<SoundChangeRule>>,
}

impl RuleInventory {
    pub fn insert(&mut self, language: LanguageId, rule: SoundChangeRule) {
        self.by_language.entry(language).or_default().insert(rule);
    }

    pub fn contains(&self, language: LanguageId, rule: &SoundChangeRule) -> bool {
        self.by_language.get(&language).is_some_and(|s| s.contains(rule))
    }

    /// Attested in some language other than `language`.
    pub fn attested_elsewhere(&self, language: LanguageId, rule: &SoundChangeRule) -> bool {
        self.by_language.iter().any(|(&l, s)| l != language && s.contains(rule))
    }

    pub fn rules(&self, language: LanguageId) -> impl Iterator<Item = &SoundChangeRule> {
        self.by_language.get(&language).into_iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_language.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `language  source  target` rows; deletions print as `∅`.
    pub fn to_tsv(&self, corpus: &Corpus) -> String {
        let mut out = String::from("language\tsource\ttarget\n");
        for (&l, rules) in &self.by_language {
            for r in rules {
                let target = if r.target.is_empty() {
                    "∅".to_string()
                } else {
                    corpus.output_vocab.render(&r.target)
                };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}",
                    corpus.languages.name(l),
                    corpus.input_vocab.symbol(r.source),
                    target
                );
            }
        }
        out
    }
}

/// Union of the gold-alignment rules of `pairs`, per language.
pub fn extract_rules(model: &TransducerModel, pairs: &[&CognatePair]) -> Result<RuleInventory, AnalysisError> {
    let mut inv = RuleInventory::default();
    for p in pairs {
        for r in pair_rules(model, &p.etymon, &p.reflex, p.language)? {
            inv.insert(p.language, r);
        }
    }
    Ok(inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorClass {
    /// Attested in the same language.
    SameLanguage,
    /// Attested only in other languages.
    OtherLanguage,
    /// Attested nowhere.
    Unmotivated,
}

impl ErrorClass {
    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::SameLanguage => "SL",
            ErrorClass::OtherLanguage => "OL",
            ErrorClass::Unmotivated => "U",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifiedEdit {
    /// Corpus index of the mispredicted pair.
    pub index: usize,
    pub language: LanguageId,
    pub rule: SoundChangeRule,
    pub class: ErrorClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBreakdown {
    pub same_language: f64,
    pub other_language: f64,
    pub unmotivated: f64,
    pub edits: Vec<ClassifiedEdit>,
}

impl ErrorBreakdown {
    /// No erroneous edits were found; all proportions are zero.
    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn count(&self, class: ErrorClass) -> usize {
        self.edits.iter().filter(|e| e.class == class).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tcount\tproportion\n");
        for (c, p) in [
            (ErrorClass::SameLanguage, self.same_language),
            (ErrorClass::OtherLanguage, self.other_language),
            (ErrorClass::Unmotivated, self.unmotivated),
        ] {
            let _ = writeln!(out, "{}\t{}\t{p:.6}", c.label(), self.count(c));
        }
        out
    }
}

/// Predicted rules that are not in the gold multiset (multiset difference).
pub fn erroneous_edits(gold: &[SoundChangeRule], predicted: &[SoundChangeRule]) -> Vec<SoundChangeRule> {
    let mut budget: HashMap<&SoundChangeRule, usize> = HashMap::new();
    for r in gold {
        *budget.entry(r).or_default() += 1;
    }
    predicted
        .iter()
        .filter(|r| match budget.get_mut(r) {
            Some(n) if *n > 0 => {
                *n -= 1;
                false
            }
            _ => true,
        })
        .cloned()
        .collect()
}

pub fn classify_rule(inventory: &RuleInventory, language: LanguageId, rule: &SoundChangeRule) -> ErrorClass {
    if inventory.contains(language, rule) {
        ErrorClass::SameLanguage
    } else if inventory.attested_elsewhere(language, rule) {
        ErrorClass::OtherLanguage
    } else {
        ErrorClass::Unmotivated
    }
}

/// SL/OL/U proportions over the erroneous edits of every wrong record.
pub fn classify_errors(
    model: &TransducerModel,
    inventory: &RuleInventory,
    records: &[Decoded],
) -> Result<ErrorBreakdown, AnalysisError> {
    let mut edits = Vec::new();
    for d in records.iter().filter(|d| !d.is_correct()) {
        let gold = pair_rules(model, &d.etymon, &d.gold, d.language)?;
        let predicted = pair_rules(model, &d.etymon, &d.predicted, d.language)?;
        for rule in erroneous_edits(&gold, &predicted) {
            edits.push(ClassifiedEdit {
                index: d.index,
                language: d.language,
                class: classify_rule(inventory, d.language, &rule),
                rule,
            });
        }
    }
    let n = edits.len();
    let share = |c: ErrorClass| {
        if n == 0 {
            0.0
        } else {
            edits.iter().filter(|e| e.class == c).count() as f64 / n as f64
        }
    };
    Ok(ErrorBreakdown {
        same_language: share(ErrorClass::SameLanguage),
        other_language: share(ErrorClass::OtherLanguage),
        unmotivated: share(ErrorClass::Unmotivated),
        edits,
    })
}

/// Row model × column model shares of word errors.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub names: Vec<String>,
    /// `cells[a][b] = |E_a ∩ E_b| / |E_a|`; `None` when model `a` made no errors.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl AgreementMatrix {
    /// Diagonal printed as `—`, undefined rows as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model");
        for n in &self.names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for (a, row) in self.cells.iter().enumerate() {
            out.push_str(&self.names[a]);
            for (b, cell) in row.iter().enumerate() {
                let text = match cell {
                    _ if a == b => "—".to_string(),
                    Some(v) => format!("{v:.6}"),
                    None => "NA".to_string(),
                };
                out.push('\t');
                out.push_str(&text);
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise error overlap of models evaluated on the same held-out pairs.
pub fn error_agreement(models: &[(String, Vec<Decoded>)]) -> Result<AgreementMatrix, AnalysisError> {
    let first = models.first().ok_or(AnalysisError::NoModels)?;
    let ids = |recs: &[Decoded]| recs.iter().map(|d| d.index).collect::<BTreeSet<usize>>();
    let reference = ids(&first.1);
    if models.iter().any(|(_, r)| ids(r) != reference || r.len() != reference.len()) {
        return Err(AnalysisError::MismatchedRecords);
    }
    let errors: Vec<BTreeSet<usize>> = models
        .iter()
        .map(|(_, r)| r.iter().filter(|d| !d.is_correct()).map(|d| d.index).collect())
        .collect();
    let cells = errors
        .iter()
        .map(|ea| {
            errors
                .iter()
                .map(|eb| (!ea.is_empty()).then(|| ea.intersection(eb).count() as f64 / ea.len() as f64))
                .collect()
        })
        .collect();
    Ok(AgreementMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}
