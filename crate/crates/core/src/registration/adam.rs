//! Adam with bias-corrected moment estimates.

use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub step_size: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(dim: usize, step_size: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            step_size: T::lit(step_size),
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(eps),
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of `params` in place.
    ///
    /// # Panics
    /// If `params` or `grad` differ in length from the optimizer state.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter dimension mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient dimension mismatch");
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.step_size, self.eps);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Convenience single step on an explicit state.
pub fn adam_step<T: Real>(state: &mut Adam<T>, params: &mut [T], gradient: &[T]) {
    state.step(params, gradient);
}
