//! Central finite-difference checking of analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest parameter vector the checker accepts.
pub const MAX_CHECK_DIM: usize = 10_000;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective<T> {
    fn value(&self, params: &[T]) -> Result<T>;
    fn gradient(&self, params: &[T]) -> Result<Vec<T>>;
}

/// `max_i |g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over all coordinates, with
/// `g_fd` the central difference at `step`.
pub fn finite_difference_check<T: Real, O: Objective<T> + ?Sized>(obj: &O, params: &[T], step: T) -> Result<f64> {
    if params.len() > MAX_CHECK_DIM {
        return Err(Error::Config(format!(
            "gradient check limited to {MAX_CHECK_DIM} parameters, got {}",
            params.len()
        )));
    }
    let analytic = obj.gradient(params)?;
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = obj.value(&p)?;
        p[i] = orig - step;
        let down = obj.value(&p)?;
        p[i] = orig;
        let fd = ((up - down) / (step + step)).as_f64();
        let ga = analytic[i].as_f64();
        let err = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `f(p) = Σ ½ a_i p_i² + b_i p_i`, a self-test objective with a known gradient.
#[derive(Clone, Debug)]
pub struct Quadratic<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Objective<T> for Quadratic<T> {
    fn value(&self, p: &[T]) -> Result<T> {
        Ok(p.iter().zip(&self.a).zip(&self.b).map(|((&x, &a), &b)| T::lit(0.5) * a * x * x + b * x).sum())
    }

    fn gradient(&self, p: &[T]) -> Result<Vec<T>> {
        Ok(p.iter().zip(&self.a).zip(&self.b).map(|((&x, &a), &b)| a * x + b).collect())
    }
}
