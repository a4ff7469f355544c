//! Stage objectives: the combined loss as a function of affine parameters or
//! of a dense increment field, with analytic gradients.

use crate::error::Result;
use crate::losses::bending::{bending_energy, bending_energy_gradient};
use crate::losses::gpl::GaussianPyramidLoss;
use crate::losses::gradcheck::Objective;
use crate::losses::histogram::{HistogramConfig, MutualInformation};
use crate::losses::mpl::{LossBreakdown, LossWeights};
use crate::par;
use crate::registration::RegistrationPair;
use crate::scalar::Real;
use crate::transform::{affine_to_field, compose_with_jacobian, warp_pair_with_gradient, AffineParams, DisplacementField};
use crate::volume::{GridMeta, LabelMask};

/// Fixed-image state shared by every evaluation of one registration.
pub struct LossContext<'a, T> {
    pair: &'a RegistrationPair<T>,
    weights: LossWeights,
    mi: MutualInformation<T>,
    gpl: GaussianPyramidLoss<T>,
}

impl<'a, T: Real> LossContext<'a, T> {
    pub fn new(pair: &'a RegistrationPair<T>, weights: &LossWeights, hist: &HistogramConfig, mi_mask: bool) -> Result<Self> {
        weights.validate()?;
        let mask = mi_mask.then_some(&pair.fixed_label);
        Ok(LossContext {
            pair,
            weights: weights.clone(),
            mi: MutualInformation::new(&pair.fixed, *hist, mask)?,
            gpl: GaussianPyramidLoss::new(&pair.fixed_label, &weights.scales, weights.gpl_metric)?,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn grid(&self) -> &GridMeta {
        self.pair.fixed.grid()
    }

    /// Loss of the transform `x ↦ x + field(x)` and, when requested, its
    /// gradient with respect to each displacement component.
    pub fn evaluate(&self, field: &DisplacementField<T>, want_grad: bool) -> Result<(LossBreakdown, Option<[Vec<T>; 3]>)> {
        let w = &self.weights;
        let (alpha, beta, lambda) = (T::lit(w.alpha), T::lit(w.beta), T::lit(w.lambda));
        let [(mw, gm), (lw, gl)] = warp_pair_with_gradient(&self.pair.moving, self.pair.moving_label.as_volume(), field)?;
        let lw = LabelMask::from_volume_clamped(lw);

        let (mi, gmi) = if want_grad && w.alpha > 0.0 {
            let (v, g) = self.mi.loss_and_gradient(&mw)?;
            (v, Some(g))
        } else {
            (self.mi.loss(&mw)?, None)
        };
        let (gpl, ggpl) = if want_grad && w.beta > 0.0 {
            let (v, g) = self.gpl.loss_and_gradient(&lw)?;
            (v, Some(g))
        } else {
            (self.gpl.loss(&lw)?, None)
        };
        let reg = bending_energy(field);
        let breakdown = LossBreakdown::new(mi.as_f64(), gpl.as_f64(), reg.as_f64(), w);
        if !want_grad {
            return Ok((breakdown, None));
        }
        let greg = (w.lambda > 0.0).then(|| bending_energy_gradient(field));
        let n = field.grid().len();
        let grad = par::map_indices_split(n, |x| {
            [0, 1, 2].map(|a| {
                let mut g = T::zero();
                if let Some(gmi) = &gmi {
                    g += alpha * gmi[x] * gm[a][x];
                }
                if let Some(ggpl) = &ggpl {
                    g += beta * ggpl[x] * gl[a][x];
                }
                if let Some(greg) = &greg {
                    g += lambda * greg.component(a)[x];
                }
                g
            })
        });
        Ok((breakdown, Some(grad)))
    }
}

/// A stage objective over a flat parameter vector.
pub trait StageObjective<T> {
    fn dim(&self) -> usize;
    fn evaluate(&self, params: &[T], want_grad: bool) -> Result<(LossBreakdown, Option<Vec<T>>)>;
}

/// The loss as a function of 12 raw affine parameters `[A | t]` (row-major).
pub struct AffineObjective<'c, 'a, T> {
    pub ctx: &'c LossContext<'a, T>,
}

impl<T: Real> AffineObjective<'_, '_, T> {
    pub fn field(&self, params: &[T]) -> Result<DisplacementField<T>> {
        Ok(affine_to_field(&AffineParams::from_slice(params)?, self.ctx.grid()))
    }
}

impl<T: Real> StageObjective<T> for AffineObjective<'_, '_, T> {
    fn dim(&self) -> usize {
        12
    }

    fn evaluate(&self, params: &[T], want_grad: bool) -> Result<(LossBreakdown, Option<Vec<T>>)> {
        let field = self.field(params)?;
        let (b, g) = self.ctx.evaluate(&field, want_grad)?;
        let Some(g) = g else { return Ok((b, None)) };
        let grid = *self.ctx.grid();
        // du_r/dA_ra = x_a, du_r/dt_r = 1
        let acc = par::reduce_chunks(
            grid.len(),
            par::CHUNK,
            |range| {
                let mut s = [T::zero(); 12];
                for idx in range {
                    let x = grid.coords(idx).map(T::from_usize_lossy);
                    for r in 0..3 {
                        let gr = g[r][idx];
                        s[4 * r] += gr * x[0];
                        s[4 * r + 1] += gr * x[1];
                        s[4 * r + 2] += gr * x[2];
                        s[4 * r + 3] += gr;
                    }
                }
                s
            },
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
            [T::zero(); 12],
        );
        Ok((b, Some(acc.to_vec())))
    }
}

/// The loss as a function of an increment field `φ_n` composed onto a frozen
/// accumulated field: `c = acc(x + φ_n(x)) + φ_n(x)`. The regularizer is taken
/// on `c`. Parameters are the increment, component-major.
pub struct CascadeObjective<'c, 'a, T> {
    pub ctx: &'c LossContext<'a, T>,
    pub accumulated: &'c DisplacementField<T>,
}

impl<T: Real> StageObjective<T> for CascadeObjective<'_, '_, T> {
    fn dim(&self) -> usize {
        3 * self.ctx.grid().len()
    }

    fn evaluate(&self, params: &[T], want_grad: bool) -> Result<(LossBreakdown, Option<Vec<T>>)> {
        let grid = *self.ctx.grid();
        let inc = DisplacementField::from_flat(grid, params)?;
        let (composed, jac) = compose_with_jacobian(self.accumulated, &inc)?;
        let (b, g) = self.ctx.evaluate(&composed, want_grad)?;
        let Some(g) = g else { return Ok((b, None)) };
        let n = grid.len();
        // dc_r/dφ_a = δ_ra + J_ra
        let split = par::map_indices_split(n, |x| {
            let (g0, g1, g2) = (g[0][x], g[1][x], g[2][x]);
            [0, 1, 2].map(|a| g[a][x] + jac[a][x] * g0 + jac[3 + a][x] * g1 + jac[6 + a][x] * g2)
        });
        Ok((b, Some(split.concat())))
    }
}

/// Adapts a stage objective to the finite-difference checker.
pub struct Checked<'o, O>(pub &'o O);

impl<T: Real, O: StageObjective<T>> Objective<T> for Checked<'_, O> {
    fn value(&self, params: &[T]) -> Result<T> {
        Ok(T::lit(self.0.evaluate(params, false)?.0.total))
    }

    fn gradient(&self, params: &[T]) -> Result<Vec<T>> {
        Ok(self.0.evaluate(params, true)?.1.expect("gradient requested"))
    }
}
