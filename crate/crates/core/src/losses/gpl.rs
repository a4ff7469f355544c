//! Gaussian-pyramid label loss: label agreement measured after smoothing both
//! labels at several scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::gaussian::SeparableGaussian;
use crate::par;
use crate::scalar::Real;
use crate::volume::{GridMeta, LabelMask};

/// Smoothing constant of the per-scale soft Dice.
pub const SOFT_DICE_EPS: f64 = 1e-5;

/// Per-scale dissimilarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GplMetric {
    /// `1 − mean_s D_s` with soft Dice `D_s`.
    #[default]
    SoftDice,
    /// `mean_s mean_x (a_s − b_s)²`.
    Mse,
}

pub(crate) fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("GPL needs at least one scale".into()));
    }
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Config(format!("GPL scales must be finite and >= 0, got {scales:?}")));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("GPL scales must be strictly increasing, got {scales:?}")));
    }
    Ok(())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    par::reduce_chunks(
        a.len(),
        par::CHUNK,
        |r| a[r.clone()].iter().zip(&b[r]).fold(T::zero(), |s, (&x, &y)| s + x * y),
        |s, p| s + p,
        T::zero(),
    )
}

struct Scale<T> {
    filter: SeparableGaussian<T>,
    fixed: Vec<T>,
    fixed_sq: T,
}

/// GPL bound to a fixed label; the filtered fixed pyramid is computed once.
pub struct GaussianPyramidLoss<T> {
    grid: GridMeta,
    metric: GplMetric,
    scales: Vec<Scale<T>>,
}

impl<T: Real> GaussianPyramidLoss<T> {
    pub fn new(fixed_label: &LabelMask<T>, scales: &[f64], metric: GplMetric) -> Result<Self> {
        validate_scales(scales)?;
        let grid = *fixed_label.grid();
        let scales = scales
            .iter()
            .map(|&s| {
                let filter = SeparableGaussian::new(s, grid.dims)?;
                let fixed = filter.apply(fixed_label.data());
                let fixed_sq = dot(&fixed, &fixed);
                Ok(Scale { filter, fixed, fixed_sq })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianPyramidLoss { grid, metric, scales })
    }

    fn eval(&self, moving: &LabelMask<T>, want_grad: bool) -> Result<(T, Option<Vec<T>>)> {
        moving.grid().check_compatible(&self.grid)?;
        let n = moving.data().len();
        let s_count = T::from_usize_lossy(self.scales.len());
        let eps = T::lit(SOFT_DICE_EPS);
        let two = T::lit(2.0);
        let mut loss = T::zero();
        let mut grad = want_grad.then(|| vec![T::zero(); n]);
        for sc in &self.scales {
            let a = sc.filter.apply(moving.data());
            let b = &sc.fixed;
            match self.metric {
                GplMetric::SoftDice => {
                    let num = two * dot(&a, b) + eps;
                    let den = dot(&a, &a) + sc.fixed_sq + eps;
                    loss += num / den;
                    if let Some(g) = grad.as_mut() {
                        // dL/da = -(2 b den - 2 a num) / (S den²)
                        let cb = -two / (s_count * den);
                        let ca = two * num / (s_count * den * den);
                        let r: Vec<T> = a.iter().zip(b).map(|(&ai, &bi)| cb * bi + ca * ai).collect();
                        let back = sc.filter.apply_adjoint(&r);
                        g.iter_mut().zip(back).for_each(|(gi, v)| *gi += v);
                    }
                }
                GplMetric::Mse => {
                    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
                    loss += dot(&d, &d) / T::from_usize_lossy(n);
                    if let Some(g) = grad.as_mut() {
                        let c = two / (s_count * T::from_usize_lossy(n));
                        let r: Vec<T> = d.iter().map(|&v| v * c).collect();
                        let back = sc.filter.apply_adjoint(&r);
                        g.iter_mut().zip(back).for_each(|(gi, v)| *gi += v);
                    }
                }
            }
        }
        let value = match self.metric {
            GplMetric::SoftDice => T::one() - loss / s_count,
            GplMetric::Mse => loss / s_count,
        };
        Ok((value, grad))
    }

    pub fn loss(&self, moving: &LabelMask<T>) -> Result<T> {
        Ok(self.eval(moving, false)?.0)
    }

    /// Loss and its derivative with respect to each moving label value.
    pub fn loss_and_gradient(&self, moving: &LabelMask<T>) -> Result<(T, Vec<T>)> {
        let (v, g) = self.eval(moving, true)?;
        Ok((v, g.expect("gradient requested")))
    }
}

/// Soft-Dice GPL between a (warped) moving label and the fixed label.
pub fn gpl_loss<T: Real>(m_label: &LabelMask<T>, f_label: &LabelMask<T>, scales: &[f64]) -> Result<T> {
    m_label.grid().check_compatible(f_label.grid())?;
    GaussianPyramidLoss::new(f_label, scales, GplMetric::SoftDice)?.loss(m_label)
}

/// `∂ gpl_loss / ∂ m_label(x)` at every voxel.
pub fn gpl_loss_gradient<T: Real>(
    m_label: &LabelMask<T>,
    f_label: &LabelMask<T>,
    scales: &[f64],
) -> Result<crate::volume::Volume<T>> {
    m_label.grid().check_compatible(f_label.grid())?;
    let (_, g) = GaussianPyramidLoss::new(f_label, scales, GplMetric::SoftDice)?.loss_and_gradient(m_label)?;
    Ok(crate::volume::Volume::from_parts_unchecked(*m_label.grid(), g))
}
