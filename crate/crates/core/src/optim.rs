use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamParams<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// Bias-corrected Adam over one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub params: AdamParams<T>,
    pub m1: Vec<T>,
    pub m2: Vec<T>,
    pub step_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdamOutcome<T> {
    Delta(Vec<T>),
    /// Non-finite gradient; moments untouched.
    Skipped,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, params: AdamParams<T>) -> Self {
        Self {
            params,
            m1: vec![T::zero(); len],
            m2: vec![T::zero(); len],
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m1.iter_mut().for_each(|m| *m = T::zero());
        self.m2.iter_mut().for_each(|m| *m = T::zero());
        self.step_count = 0;
    }

    /// Advances the moments and returns the parameter delta to apply.
    pub fn step(&mut self, grads: &[T]) -> AdamOutcome<T> {
        assert_eq!(grads.len(), self.m1.len(), "gradient length");
        if !grads.iter().all(|g| g.is_finite()) {
            return AdamOutcome::Skipped;
        }
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - beta1.powi(t);
        let bc2 = T::one() - beta2.powi(t);
        let delta = grads
            .iter()
            .zip(self.m1.iter_mut().zip(self.m2.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = beta1 * *m + (T::one() - beta1) * g;
                *v = beta2 * *v + (T::one() - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                -lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        AdamOutcome::Delta(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(outcome: AdamOutcome<f64>) -> Vec<f64> {
        match outcome {
            AdamOutcome::Delta(d) => d,
            AdamOutcome::Skipped => panic!("step skipped"),
        }
    }

    #[test]
    fn zero_gradient_zero_delta() {
        let mut adam = AdamState::new(3, AdamParams::with_lr(0.1));
        assert_eq!(delta(adam.step(&[0.0; 3])), vec![0.0; 3]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut adam = AdamState::new(3, AdamParams::with_lr(0.01));
        let d = delta(adam.step(&[2.0, -0.5, 1e-3]));
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
        assert!((d[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn quadratic_probe_converges() {
        let mut x = [1.0; 4];
        let mut adam = AdamState::new(4, AdamParams::with_lr(0.1));
        for _ in 0..200 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            for (xi, di) in x.iter_mut().zip(delta(adam.step(&g))) {
                *xi += di;
            }
        }
        assert!(x.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut adam = AdamState::new(2, AdamParams::with_lr(0.1));
        assert_eq!(adam.step(&[f64::NAN, 1.0]), AdamOutcome::Skipped);
        assert_eq!(adam.step_count, 0);
    }
}
