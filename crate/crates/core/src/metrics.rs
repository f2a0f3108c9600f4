//! Word and phoneme error rates over segment sequences.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::LanguageId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("phoneme error rate is undefined for two empty sequences")]
    BothEmpty,
    #[error("no evaluation records")]
    NoRecords,
}

/// Unit-cost edit distance at segment granularity.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the length of the longer sequence.
pub fn per<T: PartialEq>(gold: &[T], predicted: &[T]) -> Result<f64, MetricsError> {
    let longest = gold.len().max(predicted.len());
    if longest == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(levenshtein(gold, predicted) as f64 / longest as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub language: LanguageId,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.gold == self.predicted
    }
}

/// Error rates over a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    pub count: usize,
    pub errors: usize,
    pub wer: f64,
    /// Mean per-record PER.
    pub per: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub overall: Rates,
    pub by_language: BTreeMap<LanguageId, Rates>,
}

fn rates<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> Result<Rates, MetricsError> {
    let (mut count, mut errors, mut per_sum) = (0, 0, 0.0);
    for r in records {
        count += 1;
        errors += usize::from(!r.is_correct());
        per_sum += per(&r.gold, &r.predicted)?;
    }
    if count == 0 {
        return Err(MetricsError::NoRecords);
    }
    Ok(Rates {
        count,
        errors,
        wer: errors as f64 / count as f64,
        per: per_sum / count as f64,
    })
}

/// Proportion of records whose prediction differs from the gold form.
pub fn wer(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    rates(records.iter()).map(|r| r.wer)
}

/// Pooled and per-language WER and PER.
pub fn evaluate(records: &[EvalRecord]) -> Result<EvalSummary, MetricsError> {
    let overall = rates(records.iter())?;
    let mut groups: BTreeMap<LanguageId, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.language).or_default().push(r);
    }
    let by_language = groups
        .into_iter()
        .map(|(l, rs)| rates(rs.into_iter()).map(|r| (l, r)))
        .collect::<Result<_, _>>()?;
    Ok(EvalSummary { overall, by_language })
}
