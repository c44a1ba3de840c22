//! Bias-corrected Adam over a flat parameter vector.

use crate::{Error, Real, Result};

#[derive(Debug, Clone)]
pub struct AdamState<R> {
    m: Vec<R>,
    v: Vec<R>,
    step: u64,
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
}

impl<R: Real> AdamState<R> {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![R::zero(); param_count],
            v: vec![R::zero(); param_count],
            step: 0,
            lr: R::of(lr),
            beta1: R::of(0.9),
            beta2: R::of(0.999),
            eps: R::of(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [R], grads: &[R]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam buffers sized for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let one = R::one();
        let bc1 = one - self.beta1.powi(self.step as i32);
        let bc2 = one - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut adam = AdamState::<f64>::new(3, 0.1);
        let mut params = vec![1.0, -2.0, 0.5];
        adam.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias correction normalizes a unit gradient to a unit step direction
        let mut adam = AdamState::<f64>::new(1, 0.1);
        let mut params = vec![3.0];
        adam.step(&mut params, &[1.0]).unwrap();
        let moved = 3.0 - params[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut adam = AdamState::<f64>::new(4, 0.05);
            let mut params = vec![0.3, -0.1, 0.7, 2.0];
            for t in 0..50 {
                let grads: Vec<f64> = params.iter().map(|p: &f64| p.sin() + t as f64 * 1e-3).collect();
                adam.step(&mut params, &grads).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = AdamState::<f64>::new(2, 0.1);
        let mut params = vec![0.0];
        assert!(adam.step(&mut params, &[1.0]).is_err());
    }
}
