use std::cell::RefCell;

use crate::tensor::{gemm, CustomOp, Tensor, TensorError};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one `exp`; absolute error stays within a few ulps of 1.
pub(crate) fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

struct Trace {
    /// activated gates `i, f, g, o` per step, `[T, B, 4H]`
    gates: Vec<f64>,
    /// state entering each step, `[T, B, H]`
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// `tanh(c)` after each step, `[T, B, H]`
    tc: Vec<f64>,
}

/// A whole LSTM sequence, gates ordered `i, f, g, o`.
///
/// Inputs: `x_gates [B, T, 4H]` (input projections), `h0 [B, H]`,
/// `c0 [B, H]`, `w_hh [H, 4H]`, `bias [4H]`. Row `b` advances for its
/// first `lens[b]` steps and then holds its state.
///
/// Output `[B, T + 2, H]`: the hidden state after every step, then the
/// final `h` and `c`.
pub(crate) struct LstmLayer {
    lens: Vec<usize>,
    trace: RefCell<Option<Trace>>,
}

impl LstmLayer {
    pub fn new(lens: Vec<usize>) -> Self {
        Self {
            lens,
            trace: RefCell::new(None),
        }
    }
}

impl CustomOp for LstmLayer {
    fn name(&self) -> &'static str {
        "lstm_layer"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let [x, h0, c0, w, bias] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let hd = w.shape()[0];
        let b = self.lens.len();
        let steps = x.shape().get(1).copied().unwrap_or(0);
        if w.shape() != [hd, 4 * hd]
            || x.shape() != [b, steps, 4 * hd]
            || h0.numel() != b * hd
            || c0.numel() != b * hd
            || bias.numel() != 4 * hd
        {
            return Err(TensorError::Shape {
                op: "lstm_layer",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let (g4, bh) = (4 * hd, b * hd);
        let mut h = h0.data().to_vec();
        let mut c = c0.data().to_vec();
        let mut tr = Trace {
            gates: vec![0.0; steps * b * g4],
            h_prev: Vec::with_capacity(steps * bh),
            c_prev: Vec::with_capacity(steps * bh),
            tc: vec![0.0; steps * bh],
        };
        let mut out = vec![0.0; b * (steps + 2) * hd];
        for t in 0..steps {
            tr.h_prev.extend_from_slice(&h);
            tr.c_prev.extend_from_slice(&c);
            let gates = &mut tr.gates[t * b * g4..(t + 1) * b * g4];
            gemm(b, hd, g4, &h, false, w.data(), false, gates, 0.0);
            for r in 0..b {
                if t >= self.lens[r] {
                    continue;
                }
                let g = &mut gates[r * g4..(r + 1) * g4];
                let xr = &x.data()[(r * steps + t) * g4..(r * steps + t + 1) * g4];
                for k in 0..hd {
                    let pre = |q: usize| g[q * hd + k] + xr[q * hd + k] + bias.data()[q * hd + k];
                    let (i, f, gg, o) = (sigmoid(pre(0)), sigmoid(pre(1)), fast_tanh(pre(2)), sigmoid(pre(3)));
                    g[k] = i;
                    g[hd + k] = f;
                    g[2 * hd + k] = gg;
                    g[3 * hd + k] = o;
                    let cn = f * c[r * hd + k] + i * gg;
                    let th = fast_tanh(cn);
                    tr.tc[t * bh + r * hd + k] = th;
                    c[r * hd + k] = cn;
                    h[r * hd + k] = o * th;
                }
            }
            for r in 0..b {
                let at = (r * (steps + 2) + t) * hd;
                out[at..at + hd].copy_from_slice(&h[r * hd..(r + 1) * hd]);
            }
        }
        for r in 0..b {
            let at = (r * (steps + 2) + steps) * hd;
            out[at..at + hd].copy_from_slice(&h[r * hd..(r + 1) * hd]);
            out[at + hd..at + 2 * hd].copy_from_slice(&c[r * hd..(r + 1) * hd]);
        }
        *self.trace.borrow_mut() = Some(tr);
        Tensor::from_vec(out, &[b, steps + 2, hd])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [x, w] = [inputs[0], inputs[3]];
        let hd = w.shape()[0];
        let b = self.lens.len();
        let steps = x.shape()[1];
        let (g4, bh) = (4 * hd, b * hd);
        let tr = self.trace.borrow_mut().take().expect("forward runs before backward");
        let at = |r: usize, t: usize| (r * (steps + 2) + t) * hd;
        let mut dh = vec![0.0; bh];
        let mut dc = vec![0.0; bh];
        for r in 0..b {
            dh[r * hd..(r + 1) * hd].copy_from_slice(&grad[at(r, steps)..at(r, steps) + hd]);
            dc[r * hd..(r + 1) * hd].copy_from_slice(&grad[at(r, steps) + hd..at(r, steps) + 2 * hd]);
        }
        // [T, B, 4H]; rows past their length stay zero
        let mut dg = vec![0.0; steps * b * g4];
        let mut back = vec![0.0; bh];
        for t in (0..steps).rev() {
            for r in 0..b {
                let gr = &grad[at(r, t)..at(r, t) + hd];
                dh[r * hd..(r + 1) * hd].iter_mut().zip(gr).for_each(|(a, g)| *a += g);
                if t >= self.lens[r] {
                    continue;
                }
                let g = &tr.gates[(t * b + r) * g4..(t * b + r + 1) * g4];
                let d = &mut dg[(t * b + r) * g4..(t * b + r + 1) * g4];
                for k in 0..hd {
                    let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                    let th = tr.tc[t * bh + r * hd + k];
                    let dhk = dh[r * hd + k];
                    let dck = dc[r * hd + k] + dhk * o * (1.0 - th * th);
                    d[k] = dck * gg * i * (1.0 - i);
                    d[hd + k] = dck * tr.c_prev[t * bh + r * hd + k] * f * (1.0 - f);
                    d[2 * hd + k] = dck * i * (1.0 - gg * gg);
                    d[3 * hd + k] = dhk * th * o * (1.0 - o);
                    dc[r * hd + k] = dck * f;
                }
            }
            gemm(b, g4, hd, &dg[t * b * g4..(t + 1) * b * g4], false, w.data(), true, &mut back, 0.0);
            for r in 0..b {
                if t < self.lens[r] {
                    dh[r * hd..(r + 1) * hd].copy_from_slice(&back[r * hd..(r + 1) * hd]);
                }
            }
        }
        let mut dw = vec![0.0; hd * g4];
        gemm(hd, steps * b, g4, &tr.h_prev, true, &dg, false, &mut dw, 0.0);
        let mut dbias = vec![0.0; g4];
        for row in dg.chunks_exact(g4) {
            dbias.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        // back to [B, T, 4H]
        let mut dx = vec![0.0; b * steps * g4];
        for t in 0..steps {
            for r in 0..b {
                dx[(r * steps + t) * g4..(r * steps + t + 1) * g4]
                    .copy_from_slice(&dg[(t * b + r) * g4..(t * b + r + 1) * g4]);
            }
        }
        vec![Some(dx), Some(dh), Some(dc), Some(dw), Some(dbias)]
    }
}
