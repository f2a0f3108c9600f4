//! Rule-derived synthetic corpora.
//!
//! Rule files list ordered rewrite rules per language:
//!
//! ```text
//! # classes are shared by every section that follows them
//! @V = a e i o u
//! [west]
//! t -> d / @V _ @V
//! a -> o
//! k -> ∅ / _ #
//! [east]
//! {p,b} -> f / # _
//! ```
//!
//! `lhs -> rhs / left _ right`: `lhs` and `rhs` are space-separated
//! segments (`∅` or nothing for deletion). Context items are literal
//! segments, `#` (word boundary), `@NAME` classes or inline `{a,b}` sets.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{segments, Corpus, CorpusError, Segment, RESERVED_SYMBOLS};
use crate::tensor::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextItem {
    Boundary,
    Segment(String),
    Class(BTreeSet<String>),
}

impl ContextItem {
    fn matches(&self, seg: &str) -> bool {
        match self {
            ContextItem::Boundary => false,
            ContextItem::Segment(s) => s == seg,
            ContextItem::Class(set) => set.contains(seg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRule {
    /// Matched position by position; classes allowed, boundaries not.
    pub target: Vec<ContextItem>,
    pub replacement: Vec<String>,
    pub left: Vec<ContextItem>,
    pub right: Vec<ContextItem>,
}

/// Ordered rule lists per language, in file order.
pub type LanguageRules = Vec<(String, Vec<RewriteRule>)>;

impl RewriteRule {
    pub fn new(target: &[&str], replacement: &[&str]) -> Result<Self, CorpusError> {
        if target.is_empty() {
            return Err(CorpusError::Argument("rule target must be non-empty".into()));
        }
        Ok(Self {
            target: target.iter().map(|s| ContextItem::Segment(s.to_string())).collect(),
            replacement: replacement.iter().map(|s| s.to_string()).collect(),
            left: Vec::new(),
            right: Vec::new(),
        })
    }

    pub fn with_context(mut self, left: Vec<ContextItem>, right: Vec<ContextItem>) -> Self {
        self.left = left;
        self.right = right;
        self
    }

    fn left_matches(&self, word: &[String], at: usize) -> bool {
        let mut pos = at as isize - 1;
        for item in self.left.iter().rev() {
            let ok = match item {
                ContextItem::Boundary => pos == -1,
                other => pos >= 0 && other.matches(&word[pos as usize]),
            };
            if !ok {
                return false;
            }
            pos -= 1;
        }
        true
    }

    fn right_matches(&self, word: &[String], from: usize) -> bool {
        let mut pos = from;
        for item in &self.right {
            let ok = match item {
                ContextItem::Boundary => pos == word.len(),
                other => pos < word.len() && other.matches(&word[pos]),
            };
            if !ok {
                return false;
            }
            pos += 1;
        }
        true
    }

    /// One left-to-right pass. Contexts are read from the input of the
    /// pass, and matches do not overlap.
    pub fn apply(&self, word: &[String]) -> Vec<String> {
        let n = self.target.len();
        let mut out = Vec::with_capacity(word.len());
        let mut i = 0;
        while i < word.len() {
            if i + n <= word.len()
                && self.target.iter().zip(&word[i..i + n]).all(|(t, w)| t.matches(w))
                && self.left_matches(word, i)
                && self.right_matches(word, i + n)
            {
                out.extend(self.replacement.iter().cloned());
                i += n;
            } else {
                out.push(word[i].clone());
                i += 1;
            }
        }
        out
    }
}

/// Applies `rules` in list order, one full pass each.
pub fn apply_rules(word: &[String], rules: &[RewriteRule]) -> Vec<String> {
    rules.iter().fold(word.to_vec(), |w, r| r.apply(&w))
}

fn parse_context(
    text: &str,
    classes: &HashMap<String, BTreeSet<String>>,
    line: usize,
) -> Result<Vec<ContextItem>, CorpusError> {
    text.split_whitespace()
        .map(|tok| {
            if tok == "#" {
                Ok(ContextItem::Boundary)
            } else if let Some(name) = tok.strip_prefix('@') {
                classes
                    .get(name)
                    .cloned()
                    .map(ContextItem::Class)
                    .ok_or_else(|| CorpusError::Parse {
                        line,
                        reason: format!("undefined class @{name}"),
                    })
            } else if let Some(body) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Ok(ContextItem::Class(body.split(',').filter(|s| !s.is_empty()).map(String::from).collect()))
            } else {
                Ok(ContextItem::Segment(tok.to_string()))
            }
        })
        .collect()
}

fn symbols(text: &str) -> Vec<String> {
    segments(text).into_iter().map(|s| s.symbol().to_string()).collect()
}

/// Parses a rule file (see the module docs).
pub fn parse_rules(text: &str) -> Result<LanguageRules, CorpusError> {
    let mut classes: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut out: LanguageRules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with("# ") || raw == "#" {
            continue;
        }
        let err = |reason: String| CorpusError::Parse { line, reason };
        if let Some(name) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() || out.iter().any(|(n, _)| n == name) {
                return Err(err(format!("bad or repeated language header [{name}]")));
            }
            out.push((name.to_string(), Vec::new()));
            continue;
        }
        if let Some(def) = raw.strip_prefix('@') {
            let (name, members) = def
                .split_once('=')
                .ok_or_else(|| err("class definition needs '='".into()))?;
            classes.insert(name.trim().to_string(), members.split_whitespace().map(String::from).collect());
            continue;
        }
        let (change, env) = match raw.split_once(" / ") {
            Some((c, e)) => (c, Some(e)),
            None => (raw, None),
        };
        let (lhs, rhs) = change
            .split_once("->")
            .ok_or_else(|| err("rule needs '->'".into()))?;
        let target: Vec<ContextItem> = parse_context(lhs, &classes, line)?
            .into_iter()
            .flat_map(|item| match item {
                ContextItem::Segment(s) => symbols(&s).into_iter().map(ContextItem::Segment).collect(),
                other => vec![other],
            })
            .collect();
        if target.is_empty() || target.contains(&ContextItem::Boundary) {
            return Err(err("rule target must be non-empty and cannot contain '#'".into()));
        }
        let replacement: Vec<String> = symbols(rhs).into_iter().filter(|s| s != "∅").collect();
        let (left, right) = match env {
            Some(env) => {
                let (l, r) = env
                    .split_once('_')
                    .ok_or_else(|| err("environment needs '_'".into()))?;
                (parse_context(l, &classes, line)?, parse_context(r, &classes, line)?)
            }
            None => (Vec::new(), Vec::new()),
        };
        let rules = &mut out
            .last_mut()
            .ok_or_else(|| err("rule before any [language] header".into()))?
            .1;
        rules.push(RewriteRule {
            target,
            replacement,
            left,
            right,
        });
    }
    Ok(out)
}

/// Derives every language's reflex of every proto word.
///
/// The pairs are emitted in a seed-determined order; the mapping itself
/// does not depend on the seed.
pub fn generate_synthetic(
    lexicon: &[Vec<String>],
    language_rules: &[(String, Vec<RewriteRule>)],
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if lexicon.is_empty() {
        return Err(CorpusError::Argument("empty proto lexicon".into()));
    }
    for (_, rules) in language_rules {
        for r in rules {
            if let Some(bad) = r.replacement.iter().find(|s| RESERVED_SYMBOLS.contains(&s.as_str())) {
                return Err(CorpusError::Reserved(bad.clone()));
            }
        }
    }
    let mut rows = Vec::with_capacity(lexicon.len() * language_rules.len());
    for word in lexicon {
        for (lang, rules) in language_rules {
            let reflex = apply_rules(word, rules);
            if reflex.is_empty() {
                return Err(CorpusError::Argument(format!(
                    "rules of {lang} delete all of {}",
                    word.join(" ")
                )));
            }
            rows.push((lang.as_str(), word, reflex));
        }
    }
    rows.shuffle(&mut seeded_rng(seed));
    let mut corpus = Corpus::new();
    // intern languages in rule-file order so ids do not depend on the shuffle
    for (lang, _) in language_rules {
        corpus.languages.intern(lang);
    }
    let to_segments = |w: &[String]| -> Result<Vec<Segment>, CorpusError> {
        w.iter().map(|s| Segment::new(s)).collect()
    };
    for (lang, etymon, reflex) in rows {
        corpus.push(lang, &to_segments(etymon)?, &to_segments(&reflex)?)?;
    }
    Ok(corpus)
}

/// Phonotactic template for random proto words: one or more
/// (onset, vowel, optional coda) syllables.
#[derive(Debug, Clone)]
pub struct LexiconShape {
    pub onsets: Vec<String>,
    pub vowels: Vec<String>,
    pub codas: Vec<String>,
    pub coda_probability: f64,
    pub min_syllables: usize,
    pub max_syllables: usize,
}

impl Default for LexiconShape {
    fn default() -> Self {
        let v = |s: &str| s.split_whitespace().map(String::from).collect();
        Self {
            onsets: v("p t k b d g m n s r l"),
            vowels: v("a e i o u"),
            codas: v("n s r"),
            coda_probability: 0.25,
            min_syllables: 1,
            max_syllables: 3,
        }
    }
}

/// `n` distinct random words drawn from `shape`.
pub fn random_lexicon(shape: &LexiconShape, n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = seeded_rng(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < n * 1000 {
        attempts += 1;
        let syllables = rng.random_range(shape.min_syllables..=shape.max_syllables);
        let mut word = Vec::new();
        for _ in 0..syllables {
            word.push(shape.onsets[rng.random_range(0..shape.onsets.len())].clone());
            word.push(shape.vowels[rng.random_range(0..shape.vowels.len())].clone());
            if !shape.codas.is_empty() && rng.random_bool(shape.coda_probability) {
                word.push(shape.codas[rng.random_range(0..shape.codas.len())].clone());
            }
        }
        if seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn intervocalic_voicing() {
        let rules = parse_rules("@V = a e i o u\n[L1]\nt -> d / @V _ @V\n").unwrap();
        assert_eq!(apply_rules(&w("t a t a"), &rules[0].1), w("t a d a"));
    }

    #[test]
    fn rules_cascade_in_order() {
        let rules = parse_rules("[L]\na -> o\no -> u\n").unwrap();
        assert_eq!(apply_rules(&w("t a t a"), &rules[0].1), w("t u t u"));
    }

    #[test]
    fn boundaries_deletion_and_sets() {
        let rules = parse_rules("[L]\nk -> ∅ / _ #\n{p,b} -> f / # _\nn a -> / _ \n").unwrap();
        let r = &rules[0].1;
        assert_eq!(r[0].apply(&w("k a k")), w("k a"));
        assert_eq!(r[1].apply(&w("p a b")), w("f a b"));
        assert_eq!(r[2].apply(&w("n a n a t")), w("t"));
    }

    #[test]
    fn generator_identity_language_and_determinism() {
        let lex = vec![w("t a t a"), w("k o")];
        let rules = parse_rules("@V = a o\n[L1]\nt -> d / @V _ @V\n[L2]\n").unwrap();
        let c = generate_synthetic(&lex, &rules, 7).unwrap();
        assert_eq!(c.len(), 4);
        let l1 = c.languages.id("L1").unwrap();
        let l2 = c.languages.id("L2").unwrap();
        for p in &c.pairs {
            let (e, r) = (c.etymon_text(p), c.reflex_text(p));
            if p.language == l2 {
                assert_eq!(e, r);
            } else if e == "t a t a" {
                assert_eq!(p.language, l1);
                assert_eq!(r, "t a d a");
            }
        }
        let again = generate_synthetic(&lex, &rules, 7).unwrap();
        assert_eq!(c.to_tsv(), again.to_tsv());
    }

    #[test]
    fn reserved_replacement_rejected() {
        let rules = vec![("L".to_string(), vec![RewriteRule::new(&["a"], &["</s>"]).unwrap()])];
        assert!(matches!(
            generate_synthetic(&[w("a")], &rules, 0),
            Err(CorpusError::Reserved(_))
        ));
    }

    #[test]
    fn parse_errors() {
        assert!(parse_rules("a -> b\n").is_err());
        assert!(parse_rules("[L]\na b\n").is_err());
        assert!(parse_rules("[L]\na -> b / @X _\n").is_err());
        assert!(parse_rules("[L]\n[L]\n").is_err());
    }

    #[test]
    fn random_lexicon_is_distinct_and_seeded() {
        let shape = LexiconShape::default();
        let a = random_lexicon(&shape, 200, 3);
        assert_eq!(a.len(), 200);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 200);
        assert_eq!(a, random_lexicon(&shape, 200, 3));
    }
}
