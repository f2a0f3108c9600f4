use std::cell::RefCell;

use super::cell::fast_tanh;
use crate::tensor::{gemm, CustomOp, Tensor, TensorError};

/// `log p(gold[b,t] | a_t = j)` for every live lattice cell, fused:
/// `tanh(dp[b,t] + ep[b,j] + bias) · W + c`, log-softmax, pick gold.
///
/// Inputs: `dp [B·T, H]`, `ep [B·J, H]`, `bias [H]`, `W [H, V]`, `c [V]`.
/// Output `[B, T, J]`; padded cells are 0 and get no gradient.
pub(crate) struct GoldEmission {
    pub tmax: usize,
    pub jmax: usize,
    /// `(J_b, T_b)`
    pub lens: Vec<(usize, usize)>,
    /// `[B, T]`
    pub gold: Vec<usize>,
    // hidden activations and softmax rows of the live cells, from forward
    cache: RefCell<Option<(Vec<f64>, Vec<f64>)>>,
}

impl GoldEmission {
    pub fn new(tmax: usize, jmax: usize, lens: Vec<(usize, usize)>, gold: Vec<usize>) -> Self {
        Self {
            tmax,
            jmax,
            lens,
            gold,
            cache: RefCell::new(None),
        }
    }

    /// `(output index, dp row, ep row, gold)` per live cell.
    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (tmax, jmax) = (self.tmax, self.jmax);
        self.lens.iter().enumerate().flat_map(move |(b, &(jn, tn))| {
            (0..tn).flat_map(move |t| {
                (0..jn).map(move |j| ((b * tmax + t) * jmax + j, b * tmax + t, b * jmax + j, self.gold[b * tmax + t]))
            })
        })
    }

    fn live(&self) -> usize {
        self.lens.iter().map(|&(j, t)| j * t).sum()
    }
}

impl CustomOp for GoldEmission {
    fn name(&self) -> &'static str {
        "gold_emission"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let [dp, ep, bias, w, c] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let b = self.lens.len();
        let hd = bias.numel();
        let v = c.numel();
        let bad = dp.numel() != b * self.tmax * hd
            || ep.numel() != b * self.jmax * hd
            || w.shape() != [hd, v]
            || self.gold.len() != b * self.tmax
            || self.lens.iter().any(|&(j, t)| j > self.jmax || t > self.tmax);
        if bad {
            return Err(TensorError::Shape {
                op: "gold_emission",
                left: dp.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if let Some(g) = self.cells().map(|c| c.3).find(|&g| g >= v) {
            return Err(TensorError::Argument {
                op: "gold_emission",
                reason: format!("gold id {g} outside {v} classes"),
            });
        }
        let rows = self.live();
        let (dpd, epd, bd) = (dp.data(), ep.data(), bias.data());
        let mut u = vec![0.0; rows * hd];
        for (r, (_, ti, ji, _)) in self.cells().enumerate() {
            let (a, e) = (&dpd[ti * hd..(ti + 1) * hd], &epd[ji * hd..(ji + 1) * hd]);
            for (k, out) in u[r * hd..(r + 1) * hd].iter_mut().enumerate() {
                *out = fast_tanh(a[k] + e[k] + bd[k]);
            }
        }
        let mut probs = vec![0.0; rows * v];
        for row in probs.chunks_exact_mut(v) {
            row.copy_from_slice(c.data());
        }
        gemm(rows, hd, v, &u, false, w.data(), false, &mut probs, 1.0);
        let mut out = vec![0.0; b * self.tmax * self.jmax];
        for (r, (oi, _, _, g)) in self.cells().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gold_logit = row[g];
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            out[oi] = gold_logit - m - sum.ln();
            row.iter_mut().for_each(|x| *x /= sum);
        }
        *self.cache.borrow_mut() = Some((u, probs));
        Tensor::from_vec(out, &[b, self.tmax, self.jmax])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [dp, ep, bias, w, c] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let (hd, v) = (bias.numel(), c.numel());
        let rows = self.live();
        let (u, mut dl) = self.cache.borrow_mut().take().expect("forward runs before backward");
        // d logits = g · (onehot(gold) − softmax)
        let mut dc = vec![0.0; v];
        for (r, (oi, _, _, g)) in self.cells().enumerate() {
            let gr = grad[oi];
            let row = &mut dl[r * v..(r + 1) * v];
            row.iter_mut().for_each(|x| *x *= -gr);
            row[g] += gr;
            dc.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
        }
        let mut dw = vec![0.0; hd * v];
        gemm(hd, rows, v, &u, true, &dl, false, &mut dw, 0.0);
        let mut du = vec![0.0; rows * hd];
        gemm(rows, v, hd, &dl, false, w.data(), true, &mut du, 0.0);
        let mut ddp = vec![0.0; dp.numel()];
        let mut dep = vec![0.0; ep.numel()];
        let mut dbias = vec![0.0; hd];
        for (r, (_, ti, ji, _)) in self.cells().enumerate() {
            for k in 0..hd {
                let uk = u[r * hd + k];
                let d = du[r * hd + k] * (1.0 - uk * uk);
                ddp[ti * hd + k] += d;
                dep[ji * hd + k] += d;
                dbias[k] += d;
            }
        }
        vec![Some(ddp), Some(dep), Some(dbias), Some(dw), Some(dc)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Tape};
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut crate::tensor::Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn matches_unfused_ops_and_gradients() {
        let mut rng = seeded_rng(5);
        let (b, t, j, h, v) = (2, 3, 4, 5, 6);
        let ts = [
            random(&[b * t, h], &mut rng),
            random(&[b * j, h], &mut rng),
            random(&[h], &mut rng),
            random(&[h, v], &mut rng),
            random(&[v], &mut rng),
        ];
        let lens = vec![(4, 3), (2, 2)];
        let gold: Vec<usize> = (0..b * t).map(|i| i % v).collect();
        let weights: Vec<f64> = (0..b * t * j).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(weights.clone(), &[b * t * j]).unwrap();

        let mut tape = Tape::new();
        let vars: Vec<_> = ts.iter().map(|x| tape.param(x)).collect();
        let fused = tape
            .custom(Box::new(GoldEmission::new(t, j, lens.clone(), gold.clone())), &vars)
            .unwrap();
        let fused_vals = tape.value(fused).data().to_vec();
        let w = tape.constant(wt.clone());
        let flat = tape.reshape(fused, &[b * t * j]).unwrap();
        let prod = tape.mul(flat, w).unwrap();
        let loss = tape.sum(prod);
        let g1 = tape.backward(loss).unwrap();

        let mut tape = Tape::new();
        let vs: Vec<_> = ts.iter().map(|x| tape.param(x)).collect();
        let dp = tape.reshape(vs[0], &[b, t, h]).unwrap();
        let ep = tape.reshape(vs[1], &[b, j, h]).unwrap();
        let u = tape.pairwise_add(dp, ep).unwrap();
        let u = tape.add_bias(u, vs[2]).unwrap();
        let u = tape.tanh(u);
        let u = tape.reshape(u, &[b * t * j, h]).unwrap();
        let logits = tape.matmul(u, vs[3]).unwrap();
        let logits = tape.add_bias(logits, vs[4]).unwrap();
        let lp = tape.log_softmax(logits);
        let g: Vec<usize> = (0..b * t).flat_map(|i| std::iter::repeat_n(gold[i], j)).collect();
        let e = tape.gather_last(lp, &g).unwrap();
        // mask padding like the fused op does
        let mut mask = vec![0.0; b * t * j];
        for (bi, &(jn, tn)) in lens.iter().enumerate() {
            for ti in 0..tn {
                for ji in 0..jn {
                    mask[(bi * t + ti) * j + ji] = weights[(bi * t + ti) * j + ji];
                }
            }
        }
        let unfused_vals = tape.value(e).data().to_vec();
        let m = tape.constant(Tensor::from_vec(mask.clone(), &[b * t * j]).unwrap());
        let prod = tape.mul(e, m).unwrap();
        let loss = tape.sum(prod);
        let g2 = tape.backward(loss).unwrap();

        for i in 0..b * t * j {
            if mask[i] != 0.0 {
                assert!((fused_vals[i] - unfused_vals[i]).abs() < 1e-12);
            } else {
                assert_eq!(fused_vals[i], 0.0);
            }
        }
        for (a, b) in vars.iter().zip(&vs) {
            let (x, y) = (g1.get(*a).unwrap(), g2.get(*b).unwrap());
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12, "{p} vs {q}");
            }
        }
    }
}
