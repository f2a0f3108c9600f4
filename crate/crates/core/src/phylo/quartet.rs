use super::{PhyloError, PhyloTree};

/// Quartet tallies behind the generalized quartet distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuartetComparison {
    /// Resolved in both trees, with different pairings.
    pub differing: usize,
    pub resolved_in_reference: usize,
    pub total: usize,
}

impl QuartetComparison {
    pub fn distance(&self) -> Result<f64, PhyloError> {
        if self.resolved_in_reference == 0 {
            return Err(PhyloError::NoResolvedQuartets);
        }
        Ok(self.differing as f64 / self.resolved_in_reference as f64)
    }
}

/// Pairing of the quartet `q` induced by `tree`: 0 for `q0 q1 | q2 q3`,
/// 1 for `q0 q2 | q1 q3`, 2 for `q0 q3 | q1 q2`, `None` for a star.
///
/// Uses edge counts between leaves: the pairing whose two within-pair
/// paths are shortest in total is the one separated by an edge.
fn pairing(d: &[Vec<usize>], q: [usize; 4]) -> Option<u8> {
    let [a, b, c, e] = q;
    let sums = [d[a][b] + d[c][e], d[a][c] + d[b][e], d[a][e] + d[b][c]];
    let min = *sums.iter().min().expect("three sums");
    let mut winners = (0..3u8).filter(|&i| sums[i as usize] == min);
    let first = winners.next();
    if winners.next().is_some() {
        None
    } else {
        first
    }
}

fn leaf_nodes(tree: &PhyloTree, labels: &[String]) -> Vec<usize> {
    labels.iter().map(|l| tree.leaf(l).expect("checked leaf set")).collect()
}

/// Counts over all four-leaf subsets of the common leaf set.
pub fn quartet_comparison(candidate: &PhyloTree, reference: &PhyloTree) -> Result<QuartetComparison, PhyloError> {
    let (lc, lr) = (candidate.leaf_labels(), reference.leaf_labels());
    if lc != lr {
        return Err(PhyloError::LeafSetMismatch {
            only_candidate: lc.difference(&lr).cloned().collect(),
            only_reference: lr.difference(&lc).cloned().collect(),
        });
    }
    let labels: Vec<String> = lr.into_iter().collect();
    let (nc, nr) = (leaf_nodes(candidate, &labels), leaf_nodes(reference, &labels));
    let (dc, dr) = (candidate.topological_distances(), reference.topological_distances());
    let n = labels.len();
    let mut out = QuartetComparison {
        differing: 0,
        resolved_in_reference: 0,
        total: 0,
    };
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for e in c + 1..n {
                    out.total += 1;
                    let Some(r) = pairing(&dr, [nr[a], nr[b], nr[c], nr[e]]) else {
                        continue;
                    };
                    out.resolved_in_reference += 1;
                    if pairing(&dc, [nc[a], nc[b], nc[c], nc[e]]).is_some_and(|p| p != r) {
                        out.differing += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Among quartets resolved in `reference`, the fraction that `candidate`
/// resolves the other way.
pub fn generalized_quartet_distance(candidate: &PhyloTree, reference: &PhyloTree) -> Result<f64, PhyloError> {
    quartet_comparison(candidate, reference)?.distance()
}
