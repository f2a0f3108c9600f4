//! Exact marginalization over monotone hard alignments.
//!
//! For outputs `t = 0..T` and input positions `j = 0..J`, the lattice
//! holds the emission log-probability `emit[t][j] = log p(y_t | a_t = j)`
//! and the raw attention score `score[t][j]`. The alignment at step `t`
//! is drawn from the scores renormalized over the positions not behind
//! the previous alignment:
//!
//! ```text
//! log p(a_t = j | a_{t-1} = i) = score[t][j] − logsumexp_{k ≥ i} score[t][k]   (j ≥ i)
//! ```
//!
//! with `a_{-1} = 0`. Because the normalizer only depends on `i`, the
//! forward recursion factors into a prefix log-sum-exp and costs
//! `O(T·J)` per lattice instead of `O(T·J²)`.

use crate::tensor::{CustomOp, Tensor, TensorError};

/// Output-position → input-position map (0-based), non-decreasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentPath(pub Vec<usize>);

impl AlignmentPath {
    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Emission and score tables for one (input, output) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    steps: usize,
    positions: usize,
    emit: Vec<f64>,
    scores: Vec<f64>,
}

/// Forward quantities kept for the adjoint pass.
struct Forward {
    /// `suffix[t][i] = logsumexp_{k ≥ i} score[t][k]`
    suffix: Vec<f64>,
    /// `carry[t][i] = alpha[t-1][i] − suffix[t][i]` (start state at `t = 0`)
    carry: Vec<f64>,
    /// `prefix[t][j] = logsumexp_{i ≤ j} carry[t][i]`
    prefix: Vec<f64>,
    alpha: Vec<f64>,
    total: f64,
}

impl Lattice {
    pub fn new(steps: usize, positions: usize, emit: Vec<f64>, scores: Vec<f64>) -> Self {
        assert!(steps > 0 && positions > 0, "lattice needs at least one step and position");
        assert_eq!(emit.len(), steps * positions);
        assert_eq!(scores.len(), steps * positions);
        Self {
            steps,
            positions,
            emit,
            scores,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn emit(&self, t: usize, j: usize) -> f64 {
        self.emit[t * self.positions + j]
    }

    pub fn score(&self, t: usize, j: usize) -> f64 {
        self.scores[t * self.positions + j]
    }

    fn suffix_normalizers(&self, t: usize) -> Vec<f64> {
        let row = &self.scores[t * self.positions..(t + 1) * self.positions];
        let mut out = vec![f64::NEG_INFINITY; self.positions];
        let mut acc = f64::NEG_INFINITY;
        for i in (0..self.positions).rev() {
            acc = lse2(acc, row[i]);
            out[i] = acc;
        }
        out
    }

    /// `log p(a_t = to | a_{t-1} = from)`; `-inf` when `to < from`.
    pub fn transition(&self, t: usize, from: usize, to: usize) -> f64 {
        if to < from {
            return f64::NEG_INFINITY;
        }
        self.score(t, to) - self.suffix_normalizers(t)[from]
    }

    fn forward(&self) -> Forward {
        let (tn, jn) = (self.steps, self.positions);
        let mut suffix = vec![0.0; tn * jn];
        let mut carry = vec![f64::NEG_INFINITY; tn * jn];
        let mut prefix = vec![0.0; tn * jn];
        let mut alpha = vec![0.0; tn * jn];
        for t in 0..tn {
            let row = t * jn;
            suffix[row..row + jn].copy_from_slice(&self.suffix_normalizers(t));
            if t == 0 {
                carry[0] = -suffix[0];
            } else {
                for i in 0..jn {
                    carry[row + i] = alpha[row - jn + i] - suffix[row + i];
                }
            }
            let mut acc = f64::NEG_INFINITY;
            for j in 0..jn {
                acc = lse2(acc, carry[row + j]);
                prefix[row + j] = acc;
                alpha[row + j] = self.emit[row + j] + self.scores[row + j] + acc;
            }
        }
        let last = &alpha[(tn - 1) * jn..];
        let total = crate::tensor::logsumexp(last);
        Forward {
            suffix,
            carry,
            prefix,
            alpha,
            total,
        }
    }

    /// `log p(y | x)` summed over every monotone alignment.
    pub fn log_likelihood(&self) -> f64 {
        self.forward().total
    }

    /// Gradients of the log-likelihood with respect to the emission and
    /// score tables.
    pub fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (tn, jn) = (self.steps, self.positions);
        let f = self.forward();
        let mut d_emit = vec![0.0; tn * jn];
        let mut d_scores = vec![0.0; tn * jn];
        let mut d_alpha: Vec<f64> = f.alpha[(tn - 1) * jn..]
            .iter()
            .map(|a| (a - f.total).exp())
            .collect();
        for t in (0..tn).rev() {
            let row = t * jn;
            for j in 0..jn {
                d_emit[row + j] = d_alpha[j];
                d_scores[row + j] += d_alpha[j];
            }
            // adjoint of the prefix log-sum-exp
            let mut d_carry = vec![0.0; jn];
            for (i, dc) in d_carry.iter_mut().enumerate() {
                let c = f.carry[row + i];
                if c == f64::NEG_INFINITY {
                    continue;
                }
                *dc = (i..jn)
                    .map(|j| d_alpha[j] * (c - f.prefix[row + j]).exp())
                    .sum();
            }
            // carry = alpha_prev − suffix; adjoint of the suffix log-sum-exp
            for k in 0..jn {
                let s = self.scores[row + k];
                d_scores[row + k] -= (0..=k)
                    .filter(|&i| f.carry[row + i] != f64::NEG_INFINITY)
                    .map(|i| d_carry[i] * (s - f.suffix[row + i]).exp())
                    .sum::<f64>();
            }
            d_alpha = d_carry;
        }
        (d_emit, d_scores)
    }

    /// Most probable alignment and its joint log-probability with `y`.
    /// Ties go to the smaller input position.
    pub fn viterbi(&self) -> (AlignmentPath, f64) {
        let (tn, jn) = (self.steps, self.positions);
        let mut delta = vec![f64::NEG_INFINITY; jn];
        let mut back = vec![0usize; tn * jn];
        for t in 0..tn {
            let suffix = self.suffix_normalizers(t);
            let mut next = vec![f64::NEG_INFINITY; jn];
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            if t == 0 {
                // the start state sits at position 0
                best = -suffix[0];
            }
            for j in 0..jn {
                if t > 0 && delta[j] - suffix[j] > best {
                    best = delta[j] - suffix[j];
                    arg = j;
                }
                back[t * jn + j] = arg;
                next[j] = self.emit(t, j) + self.score(t, j) + best;
            }
            delta = next;
        }
        let (mut end, mut best) = (0, f64::NEG_INFINITY);
        for (j, &d) in delta.iter().enumerate() {
            if d > best {
                best = d;
                end = j;
            }
        }
        let mut path = vec![0; tn];
        path[tn - 1] = end;
        for t in (1..tn).rev() {
            path[t - 1] = back[t * jn + path[t]];
        }
        (AlignmentPath(path), best)
    }

    /// Joint log-probability of `y` and one alignment.
    pub fn path_log_prob(&self, path: &AlignmentPath) -> f64 {
        let mut prev = 0;
        let mut total = 0.0;
        for (t, &j) in path.0.iter().enumerate() {
            total += self.transition(t, prev, j) + self.emit(t, j);
            prev = j;
        }
        total
    }
}

/// Batched lattice log-likelihood as a tape operation.
///
/// Inputs are `emit` and `scores`, both `[B, T, J]` (padded); output is
/// `[B]`. `lens[b] = (J_b, T_b)` selects the live corner of each slice.
pub(crate) struct MonotonicAlignment {
    pub lens: Vec<(usize, usize)>,
}

impl MonotonicAlignment {
    fn slice(&self, emit: &Tensor, scores: &Tensor, b: usize) -> Lattice {
        let (tmax, jmax) = (emit.shape()[1], emit.shape()[2]);
        let (jn, tn) = self.lens[b];
        let pick = |src: &Tensor| -> Vec<f64> {
            let base = b * tmax * jmax;
            (0..tn)
                .flat_map(|t| &src.data()[base + t * jmax..base + t * jmax + jn])
                .copied()
                .collect()
        };
        Lattice::new(tn, jn, pick(emit), pick(scores))
    }
}

impl CustomOp for MonotonicAlignment {
    fn name(&self) -> &'static str {
        "monotonic_alignment"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let (emit, scores) = (inputs[0], inputs[1]);
        if emit.shape() != scores.shape() || emit.shape().len() != 3 || emit.shape()[0] != self.lens.len() {
            return Err(TensorError::Shape {
                op: "monotonic_alignment",
                left: emit.shape().to_vec(),
                right: scores.shape().to_vec(),
            });
        }
        let (tmax, jmax) = (emit.shape()[1], emit.shape()[2]);
        if self.lens.iter().any(|&(j, t)| j == 0 || t == 0 || j > jmax || t > tmax) {
            return Err(TensorError::Argument {
                op: "monotonic_alignment",
                reason: "lengths outside the padded lattice".into(),
            });
        }
        let out = (0..self.lens.len())
            .map(|b| self.slice(emit, scores, b).log_likelihood())
            .collect();
        Tensor::from_vec(out, &[self.lens.len()])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (emit, scores) = (inputs[0], inputs[1]);
        let (tmax, jmax) = (emit.shape()[1], emit.shape()[2]);
        let mut d_emit = vec![0.0; emit.numel()];
        let mut d_scores = vec![0.0; scores.numel()];
        for (b, &g) in grad.iter().enumerate() {
            let (jn, tn) = self.lens[b];
            let (de, ds) = self.slice(emit, scores, b).gradients();
            let base = b * tmax * jmax;
            for t in 0..tn {
                for j in 0..jn {
                    d_emit[base + t * jmax + j] += g * de[t * jn + j];
                    d_scores[base + t * jmax + j] += g * ds[t * jn + j];
                }
            }
        }
        vec![Some(d_emit), Some(d_scores)]
    }
}
