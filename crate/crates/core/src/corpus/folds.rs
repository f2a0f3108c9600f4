use rand::seq::SliceRandom;

use super::{Corpus, CorpusError};
use crate::tensor::seeded_rng;

/// Train/test index sets for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold split.
///
/// Each language's pair indices are shuffled (languages in table order,
/// one generator for the whole call) and cut into `k` contiguous chunks
/// with boundaries `⌊i·n/k⌋`; chunk `i` is the test set of fold `i`. A
/// language with fewer than `k` forms leaves some folds without test
/// items for that language.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<FoldSplit>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::Argument(format!("need at least 2 folds, got {k}")));
    }
    let mut by_language: Vec<Vec<usize>> = vec![Vec::new(); corpus.languages.len()];
    for (i, p) in corpus.pairs.iter().enumerate() {
        by_language[p.language.0].push(i);
    }
    let mut rng = seeded_rng(seed);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut idx in by_language {
        idx.shuffle(&mut rng);
        let n = idx.len();
        for (fold, test) in tests.iter_mut().enumerate() {
            test.extend_from_slice(&idx[fold * n / k..(fold + 1) * n / k]);
        }
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold, mut test)| {
            test.sort_unstable();
            let mut in_test = vec![false; corpus.len()];
            test.iter().for_each(|&i| in_test[i] = true);
            let train = (0..corpus.len()).filter(|&i| !in_test[i]).collect();
            FoldSplit { fold, train, test }
        })
        .collect())
}
