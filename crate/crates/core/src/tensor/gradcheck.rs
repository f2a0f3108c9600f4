//! Central finite-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

/// Per-parameter comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per parameter
    /// (0 when both vanish).
    pub relative_errors: Vec<f64>,
    /// Largest elementwise absolute difference over all parameters.
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, perturbing one entry at a time.
pub fn check_gradients<F>(params: &[Tensor], f: F, h: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut relative_errors = Vec::with_capacity(params.len());
    let mut max_abs_error = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = evaluate(&work, &f)?;
            work[pi].data_mut()[k] = orig - h;
            let down = evaluate(&work, &f)?;
            work[pi].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        max_abs_error = diff.iter().fold(max_abs_error, |m, d| m.max(d.abs()));
        let scale = norm(grad).max(norm(&numeric));
        relative_errors.push(if scale == 0.0 { 0.0 } else { norm(&diff) / scale });
    }
    Ok(GradCheck {
        relative_errors,
        max_abs_error,
    })
}
