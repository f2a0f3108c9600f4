//! Trees from embedding distances, and how far they are from a reference.

mod newick;
mod nj;
mod quartet;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng as _;
use thiserror::Error;

use crate::tensor::Rng;

pub use newick::{emit_newick, parse_newick};
pub use nj::neighbor_join;
pub use quartet::{generalized_quartet_distance, quartet_comparison, QuartetComparison};

#[derive(Debug, Error, PartialEq)]
pub enum PhyloError {
    #[error("need at least {needed} taxa, got {got}")]
    TooFewTaxa { needed: usize, got: usize },
    #[error("zero vector for taxon {0}")]
    ZeroVector(String),
    #[error("taxon {taxon} has dimension {got}, expected {expected}")]
    DimensionMismatch { taxon: String, got: usize, expected: usize },
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("newick parse error at offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("duplicate leaf label {label:?} at offset {offset}")]
    DuplicateLabel { label: String, offset: usize },
    #[error("leaf sets differ: only in candidate {only_candidate:?}, only in reference {only_reference:?}")]
    LeafSetMismatch {
        only_candidate: Vec<String>,
        only_reference: Vec<String>,
    },
    #[error("the reference tree resolves no quartets")]
    NoResolvedQuartets,
}

/// Symmetric, non-negative, zero-diagonal distances between named taxa.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    taxa: Vec<String>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// `values` is row-major `n × n`.
    pub fn new(taxa: Vec<String>, values: Vec<f64>) -> Result<Self, PhyloError> {
        let n = taxa.len();
        if values.len() != n * n {
            return Err(PhyloError::InvalidMatrix(format!("{} values for {n} taxa", values.len())));
        }
        if taxa.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(PhyloError::InvalidMatrix("duplicate taxon".into()));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(PhyloError::InvalidMatrix(format!("nonzero diagonal at {}", taxa[i])));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 || v != values[j * n + i] {
                    return Err(PhyloError::InvalidMatrix(format!(
                        "bad entry {v} between {} and {}",
                        taxa[i], taxa[j]
                    )));
                }
            }
        }
        Ok(Self { taxa, values })
    }

    pub fn taxa(&self) -> &[String] {
        &self.taxa
    }

    pub fn len(&self) -> usize {
        self.taxa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taxa.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.taxa.len() + j]
    }

    /// Header row of taxa, then one labelled row per taxon.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.taxa {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for (i, t) in self.taxa.iter().enumerate() {
            out.push_str(t);
            for j in 0..self.len() {
                let _ = write!(out, "\t{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// `d(i, j) = 1 − cos(v_i, v_j)`, clamped into `[0, 2]` against rounding.
pub fn cosine_distance_matrix(items: &[(String, Vec<f64>)]) -> Result<DistanceMatrix, PhyloError> {
    let dim = items.first().map_or(0, |(_, v)| v.len());
    let mut norms = Vec::with_capacity(items.len());
    for (name, v) in items {
        if v.len() != dim {
            return Err(PhyloError::DimensionMismatch {
                taxon: name.clone(),
                got: v.len(),
                expected: dim,
            });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(PhyloError::ZeroVector(name.clone()));
        }
        norms.push(norm);
    }
    let n = items.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = items[i].1.iter().zip(&items[j].1).map(|(a, b)| a * b).sum();
            let d = (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix::new(items.iter().map(|(n, _)| n.clone()).collect(), values)
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    label: Option<String>,
    /// `(neighbor, branch length)`
    edges: Vec<(usize, Option<f64>)>,
}

/// Unrooted tree with labelled leaves and optional branch lengths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhyloTree {
    nodes: Vec<Node>,
}

impl PhyloTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_leaf(&mut self, label: &str) -> usize {
        self.nodes.push(Node {
            label: Some(label.to_string()),
            edges: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn add_internal(&mut self) -> usize {
        self.nodes.push(Node {
            label: None,
            edges: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn connect(&mut self, a: usize, b: usize, length: Option<f64>) {
        self.nodes[a].edges.push((b, length));
        self.nodes[b].edges.push((a, length));
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn label(&self, node: usize) -> Option<&str> {
        self.nodes[node].label.as_deref()
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, Option<f64>)> + '_ {
        self.nodes[node].edges.iter().copied()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.nodes[node].edges.len()
    }

    /// Labelled nodes, in node order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].label.is_some()).collect()
    }

    pub fn leaf_labels(&self) -> BTreeSet<String> {
        self.nodes.iter().filter_map(|n| n.label.clone()).collect()
    }

    pub fn leaf(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label.as_deref() == Some(label))
    }

    /// Removes unlabelled degree-2 nodes, merging their two edges.
    pub(crate) fn suppress_unary(&mut self) {
        loop {
            let Some(v) = (0..self.nodes.len()).find(|&i| self.nodes[i].label.is_none() && self.nodes[i].edges.len() == 2)
            else {
                break;
            };
            let [(a, la), (b, lb)] = [self.nodes[v].edges[0], self.nodes[v].edges[1]];
            let len = match (la, lb) {
                (None, None) => None,
                (x, y) => Some(x.unwrap_or(0.0) + y.unwrap_or(0.0)),
            };
            self.nodes[a].edges.retain(|&(n, _)| n != v);
            self.nodes[b].edges.retain(|&(n, _)| n != v);
            self.nodes[v].edges.clear();
            self.connect(a, b, len);
            self.remove_node(v);
        }
    }

    fn remove_node(&mut self, v: usize) {
        assert!(self.nodes[v].edges.is_empty());
        self.nodes.remove(v);
        for n in &mut self.nodes {
            for (m, _) in &mut n.edges {
                if *m > v {
                    *m -= 1;
                }
            }
        }
    }

    /// Edge counts between every pair of nodes (BFS from each node).
    pub fn topological_distances(&self) -> Vec<Vec<usize>> {
        (0..self.nodes.len())
            .map(|s| {
                let mut dist = vec![usize::MAX; self.nodes.len()];
                dist[s] = 0;
                let mut queue = VecDeque::from([s]);
                while let Some(u) = queue.pop_front() {
                    for &(v, _) in &self.nodes[u].edges {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Leaf-to-leaf path lengths, taxa sorted; missing lengths count 1.
    pub fn path_length_matrix(&self) -> DistanceMatrix {
        let leaves = self.sorted_leaves();
        let n = leaves.len();
        let mut values = vec![0.0; n * n];
        for (i, &s) in leaves.iter().enumerate() {
            let mut dist = vec![f64::NAN; self.nodes.len()];
            dist[s] = 0.0;
            let mut stack = vec![s];
            while let Some(u) = stack.pop() {
                for &(v, l) in &self.nodes[u].edges {
                    if dist[v].is_nan() {
                        dist[v] = dist[u] + l.unwrap_or(1.0);
                        stack.push(v);
                    }
                }
            }
            for (j, &t) in leaves.iter().enumerate() {
                values[i * n + j] = dist[t];
            }
        }
        // symmetrize exactly; float sums along a path can differ by direction
        for i in 0..n {
            for j in i + 1..n {
                let v = values[i * n + j].min(values[j * n + i]);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        let taxa = leaves.iter().map(|&l| self.nodes[l].label.clone().expect("leaf")).collect();
        DistanceMatrix::new(taxa, values).expect("tree distances form a valid matrix")
    }

    /// Leaves ordered by label.
    pub(crate) fn sorted_leaves(&self) -> Vec<usize> {
        let mut leaves = self.leaves();
        leaves.sort_by(|&a, &b| self.nodes[a].label.cmp(&self.nodes[b].label));
        leaves
    }

    /// Non-trivial bipartitions, each given by the side without the
    /// smallest label.
    pub fn splits(&self) -> BTreeSet<BTreeSet<String>> {
        let all = self.leaf_labels();
        let Some(anchor) = all.iter().next().cloned() else {
            return BTreeSet::new();
        };
        let mut out = BTreeSet::new();
        for u in 0..self.nodes.len() {
            for &(v, _) in &self.nodes[u].edges {
                if u > v {
                    continue;
                }
                let side = self.side(v, u);
                let side = if side.contains(&anchor) {
                    all.difference(&side).cloned().collect()
                } else {
                    side
                };
                if side.len() >= 2 && all.len() - side.len() >= 2 {
                    out.insert(side);
                }
            }
        }
        out
    }

    /// Labels reachable from `start` without crossing back to `from`.
    fn side(&self, start: usize, from: usize) -> BTreeSet<String> {
        let mut seen = BTreeSet::from([from, start]);
        let mut stack = vec![start];
        let mut labels = BTreeSet::new();
        while let Some(u) = stack.pop() {
            if let Some(l) = &self.nodes[u].label {
                labels.insert(l.clone());
            }
            for &(v, _) in &self.nodes[u].edges {
                if seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        labels
    }

    /// Same leaf set and the same bipartitions.
    pub fn same_topology(&self, other: &PhyloTree) -> bool {
        self.leaf_labels() == other.leaf_labels() && self.splits() == other.splits()
    }

    /// Uniformly grown random unrooted binary tree: each new leaf
    /// subdivides a random existing edge. Lengths are drawn from
    /// `(0.05, 1)` when `lengths` is set.
    pub fn random_binary(labels: &[String], lengths: bool, rng: &mut Rng) -> Result<Self, PhyloError> {
        if labels.len() < 3 {
            return Err(PhyloError::TooFewTaxa {
                needed: 3,
                got: labels.len(),
            });
        }
        let len = |rng: &mut Rng| lengths.then(|| rng.random_range(0.05..1.0));
        let mut t = PhyloTree::new();
        let center = t.add_internal();
        for l in &labels[..3] {
            let leaf = t.add_leaf(l);
            let bl = len(rng);
            t.connect(center, leaf, bl);
        }
        let mut edges: Vec<(usize, usize)> = (1..=3).map(|l| (center, l)).collect();
        for l in &labels[3..] {
            let pick = rng.random_range(0..edges.len());
            let (a, b) = edges.swap_remove(pick);
            t.nodes[a].edges.retain(|&(n, _)| n != b);
            t.nodes[b].edges.retain(|&(n, _)| n != a);
            let mid = t.add_internal();
            let leaf = t.add_leaf(l);
            let (la, lb, ll) = (len(rng), len(rng), len(rng));
            t.connect(a, mid, la);
            t.connect(mid, b, lb);
            t.connect(mid, leaf, ll);
            edges.extend([(a, mid), (mid, b), (mid, leaf)]);
        }
        Ok(t)
    }

    /// Degree histogram of unlabelled nodes, for sanity checks.
    pub fn internal_degrees(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| n.label.is_none()) {
            *out.entry(n.edges.len()).or_insert(0) += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn cosine_examples() {
        let m = cosine_distance_matrix(&[
            ("a".into(), vec![1.0, 1.0, 0.0]),
            ("b".into(), vec![1.0, 0.0, 1.0]),
            ("c".into(), vec![0.0, 0.0, 2.0]),
            ("d".into(), vec![2.0, 2.0, 0.0]),
        ])
        .unwrap();
        assert!((m.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(m.get(0, 2), 1.0);
        assert!(m.get(0, 3).abs() < 1e-15);
        let err = cosine_distance_matrix(&[("x".into(), vec![1.0]), ("zero".into(), vec![0.0])]).unwrap_err();
        assert_eq!(err, PhyloError::ZeroVector("zero".into()));
    }

    #[test]
    fn matrix_tsv_has_header() {
        let m = DistanceMatrix::new(vec!["A".into(), "B".into()], vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(m.to_tsv(), "\tA\tB\nA\t0\t0.5\nB\t0.5\t0\n");
        assert!(DistanceMatrix::new(vec!["A".into(), "B".into()], vec![0.0, 0.5, 0.4, 0.0]).is_err());
    }

    #[test]
    fn random_trees_are_binary() {
        let mut rng = seeded_rng(3);
        for n in 3..10 {
            let t = PhyloTree::random_binary(&names(n), true, &mut rng).unwrap();
            assert_eq!(t.leaves().len(), n);
            assert_eq!(t.internal_degrees(), BTreeMap::from([(3, n - 2)]));
            assert_eq!(t.splits().len(), n - 3);
        }
    }

    #[test]
    fn path_lengths_are_additive() {
        let mut rng = seeded_rng(4);
        let t = PhyloTree::random_binary(&names(6), true, &mut rng).unwrap();
        let d = t.path_length_matrix();
        // four-point condition: the two largest pair sums agree
        for a in 0..6 {
            for b in a + 1..6 {
                for c in b + 1..6 {
                    for e in c + 1..6 {
                        let mut s = [
                            d.get(a, b) + d.get(c, e),
                            d.get(a, c) + d.get(b, e),
                            d.get(a, e) + d.get(b, c),
                        ];
                        s.sort_by(f64::total_cmp);
                        assert!((s[2] - s[1]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
