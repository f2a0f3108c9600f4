use super::{Tensor, TensorError};

/// Moment buffers and hyperparameters for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over `params`, in order.
///
/// Moment buffers are allocated on the first call and matched to the
/// parameters by position afterwards. Gradients are read, not cleared.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<(), TensorError> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TensorError::MissingGradient(format!("#{i}")));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(TensorError::Argument {
            op: "adam_step",
            reason: "parameter set does not match optimizer state".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    for ((param, m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let grad = param.grad.take().expect("checked above");
        for (((w, g), m), v) in param
            .data
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        param.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![value], &[1]).unwrap();
        t.accumulate_grad(&[grad]);
        t
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // at t = 1 both bias-corrected moments equal the raw gradient, so
        // the step is lr * g / (|g| + eps)
        let mut theta = with_grad(1.0, 1.0);
        let mut state = AdamState::new(0.001);
        adam_step(&mut [&mut theta], &mut state).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((theta.data()[0] - expected).abs() < 1e-15);
        assert!((theta.data()[0] - 0.999).abs() < 1e-10);
        assert_eq!(state.step_count(), 1);
        assert_eq!(theta.grad(), Some(&[1.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = Tensor::from_vec(vec![0.5, -2.0], &[2]).unwrap();
        a.accumulate_grad(&[0.0, 0.0]);
        let mut state = AdamState::new(0.001);
        for _ in 0..3 {
            adam_step(&mut [&mut a], &mut state).unwrap();
        }
        assert_eq!(a.data(), &[0.5, -2.0]);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = with_grad(0.3, -0.7);
        let mut b = with_grad(0.3, -0.7);
        let (mut sa, mut sb) = (AdamState::new(0.01), AdamState::new(0.01));
        for _ in 0..5 {
            adam_step(&mut [&mut a], &mut sa).unwrap();
            adam_step(&mut [&mut b], &mut sb).unwrap();
        }
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut a = Tensor::zeros(&[3]);
        let err = adam_step(&mut [&mut a], &mut AdamState::new(0.1)).unwrap_err();
        assert!(matches!(err, TensorError::MissingGradient(_)));
    }
}
