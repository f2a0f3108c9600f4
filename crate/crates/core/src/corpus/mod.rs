//! Segmented cognate corpora.
//!
//! A corpus file holds one `language<TAB>etymon<TAB>reflex` triple per
//! line, with segments separated by single spaces. Lines starting with `#`
//! are comments. Backslash escapes: `\\`, `\#` and `\u{XXXX}`.
//!
//! Stress and tone marks are split off into standalone segments flagged
//! as suprasegmental, so `ˈg o r` ingests as `ˈ g o r`.

mod folds;
pub mod synth;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use folds::{make_folds, FoldSplit};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED_SYMBOLS: [&str; 3] = ["<s>", "</s>", "<pad>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus contains no pairs")]
    Empty,
    #[error("invalid segment {0:?}")]
    InvalidSegment(String),
    #[error("symbol {0:?} collides with a reserved token")]
    Reserved(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Whether `c` is a stress or tone mark.
pub fn is_suprasegmental_char(c: char) -> bool {
    matches!(c, 'ˈ' | 'ˌ' | '˥' | '˦' | '˧' | '˨' | '˩')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    symbol: String,
    suprasegmental: bool,
}

impl Segment {
    pub fn new(symbol: &str) -> Result<Self, CorpusError> {
        if symbol.is_empty() || symbol.chars().any(char::is_whitespace) {
            return Err(CorpusError::InvalidSegment(symbol.to_string()));
        }
        Ok(Self {
            symbol: symbol.to_string(),
            suprasegmental: symbol.chars().all(is_suprasegmental_char),
        })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn is_suprasegmental(&self) -> bool {
        self.suprasegmental
    }
}

/// Splits one whitespace-free token into segments, detaching every
/// suprasegmental mark.
pub fn split_token(token: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut run = String::new();
    for c in token.chars() {
        if is_suprasegmental_char(c) {
            if !run.is_empty() {
                out.push(Segment::new(&run).expect("non-empty run"));
                run.clear();
            }
            out.push(Segment::new(c.encode_utf8(&mut [0; 4])).expect("mark"));
        } else {
            run.push(c);
        }
    }
    if !run.is_empty() {
        out.push(Segment::new(&run).expect("non-empty run"));
    }
    out
}

/// Splits a space-separated segment string.
pub fn segments(text: &str) -> Vec<Segment> {
    text.split_whitespace().flat_map(split_token).collect()
}

/// Dense symbol table. Output vocabularies reserve ids 0..3 for
/// [`BOS`], [`EOS`] and [`PAD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    segments: Vec<Segment>,
    reserved: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    reserved: usize,
    symbols: Vec<Segment>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.symbol.clone(), i))
            .collect();
        Self {
            segments: r.symbols,
            reserved: r.reserved,
            index,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            reserved: v.reserved,
            symbols: v.segments,
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            segments: Vec::new(),
            reserved: 0,
            index: HashMap::new(),
        }
    }

    pub fn with_reserved() -> Self {
        let mut v = Self::new();
        for s in RESERVED_SYMBOLS {
            v.index.insert(s.to_string(), v.segments.len());
            v.segments.push(Segment {
                symbol: s.to_string(),
                suprasegmental: false,
            });
        }
        v.reserved = RESERVED_SYMBOLS.len();
        v
    }

    pub fn intern(&mut self, seg: &Segment) -> Result<usize, CorpusError> {
        if let Some(&id) = self.index.get(&seg.symbol) {
            if id < self.reserved {
                return Err(CorpusError::Reserved(seg.symbol.clone()));
            }
            return Ok(id);
        }
        if RESERVED_SYMBOLS.contains(&seg.symbol.as_str()) {
            return Err(CorpusError::Reserved(seg.symbol.clone()));
        }
        let id = self.segments.len();
        self.index.insert(seg.symbol.clone(), id);
        self.segments.push(seg.clone());
        Ok(id)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn segment(&self, id: usize) -> &Segment {
        &self.segments[id]
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.segments[id].symbol
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn reserved(&self) -> usize {
        self.reserved
    }

    /// Non-reserved symbols in id order.
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.segments[self.reserved..].iter().map(|s| s.symbol.as_str())
    }

    /// Looks up every symbol of a space-separated string.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        segments(text)
            .iter()
            .map(|s| self.id(&s.symbol).ok_or_else(|| CorpusError::InvalidSegment(s.symbol.clone())))
            .collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LanguageId(pub usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LanguageTable {
    names: Vec<String>,
    index: HashMap<String, LanguageId>,
}

impl From<Vec<String>> for LanguageTable {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), LanguageId(i)))
            .collect();
        Self { names, index }
    }
}

impl From<LanguageTable> for Vec<String> {
    fn from(t: LanguageTable) -> Self {
        t.names
    }
}

impl LanguageTable {
    pub fn intern(&mut self, name: &str) -> LanguageId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = LanguageId(self.names.len());
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<LanguageId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: LanguageId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LanguageId, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (LanguageId(i), n.as_str()))
    }
}

/// One training example. Segment ids index the corpus vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CognatePair {
    pub language: LanguageId,
    pub etymon: Vec<usize>,
    pub reflex: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub pairs: Vec<CognatePair>,
    pub languages: LanguageTable,
    pub input_vocab: Vocabulary,
    pub output_vocab: Vocabulary,
}

impl Corpus {
    pub fn new() -> Self {
        Self {
            pairs: Vec::new(),
            languages: LanguageTable::default(),
            input_vocab: Vocabulary::new(),
            output_vocab: Vocabulary::with_reserved(),
        }
    }

    pub fn push(&mut self, language: &str, etymon: &[Segment], reflex: &[Segment]) -> Result<(), CorpusError> {
        if etymon.is_empty() || reflex.is_empty() {
            return Err(CorpusError::Argument("etymon and reflex must be non-empty".into()));
        }
        if language.is_empty() || language.chars().any(char::is_whitespace) {
            return Err(CorpusError::Argument(format!("invalid language id {language:?}")));
        }
        let etymon = etymon
            .iter()
            .map(|s| self.input_vocab.intern(s))
            .collect::<Result<_, _>>()?;
        let reflex = reflex
            .iter()
            .map(|s| self.output_vocab.intern(s))
            .collect::<Result<_, _>>()?;
        let language = self.languages.intern(language);
        self.pairs.push(CognatePair {
            language,
            etymon,
            reflex,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair counts per language, in language-table order.
    pub fn language_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.languages.len()];
        for p in &self.pairs {
            counts[p.language.0] += 1;
        }
        counts
    }

    pub fn etymon_text(&self, pair: &CognatePair) -> String {
        self.input_vocab.render(&pair.etymon)
    }

    pub fn reflex_text(&self, pair: &CognatePair) -> String {
        self.output_vocab.render(&pair.reflex)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let esc = |ids: &[usize], vocab: &Vocabulary| {
                ids.iter()
                    .map(|&i| escape(vocab.symbol(i)))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let mut lang = escape(self.languages.name(p.language));
            if lang.starts_with('#') {
                lang.insert(0, '\\');
            }
            let _ = writeln!(
                out,
                "{lang}\t{}\t{}",
                esc(&p.etymon, &self.input_vocab),
                esc(&p.reflex, &self.output_vocab)
            );
        }
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
}

fn unescape(s: &str, line: usize) -> Result<String, CorpusError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('#') => out.push('#'),
            Some('u') => {
                let rest: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let code = rest
                    .strip_prefix('{')
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .and_then(char::from_u32)
                    .ok_or_else(|| CorpusError::Parse {
                        line,
                        reason: format!("bad unicode escape \\u{rest}"),
                    })?;
                out.push(code);
            }
            other => {
                return Err(CorpusError::Parse {
                    line,
                    reason: format!("unknown escape \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

fn parse_field(field: &str, line: usize) -> Result<Vec<Segment>, CorpusError> {
    let mut out = Vec::new();
    for tok in field.split(' ').filter(|t| !t.is_empty()) {
        out.extend(split_token(&unescape(tok, line)?));
    }
    if out.is_empty() {
        return Err(CorpusError::Parse {
            line,
            reason: "empty segment sequence".into(),
        });
    }
    Ok(out)
}

/// Parses corpus text. Line order and duplicate lines are preserved.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(CorpusError::Parse {
                line,
                reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let lang = unescape(cols[0].trim(), line)?;
        let etymon = parse_field(cols[1], line)?;
        let reflex = parse_field(cols[2], line)?;
        corpus.push(&lang, &etymon, &reflex).map_err(|e| CorpusError::Parse {
            line,
            reason: e.to_string(),
        })?;
    }
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}
