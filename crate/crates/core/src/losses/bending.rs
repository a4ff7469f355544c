//! Bending energy of a displacement field and its gradient.
//!
//! `E = mean over interior voxels and components of
//! (u_xx² + u_yy² + u_zz² + 2u_xy² + 2u_xz² + 2u_yz²)` with second central
//! differences. Voxels on the grid boundary are excluded from the mean.

use rayon::prelude::*;

use crate::scalar::Real;
use crate::transform::DisplacementField;
use crate::volume::GridMeta;

/// Axis pairs for the six second-derivative stencils.
const PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Second difference `D_ab` of `u` at `idx` on a grid with `strides`
/// (neighbors must exist).
#[inline(always)]
fn second_diff<T: Real>(u: &[T], idx: usize, strides: [usize; 3], (a, b): (usize, usize)) -> T {
    let (sa, sb) = (strides[a], strides[b]);
    if a == b {
        u[idx + sa] - T::lit(2.0) * u[idx] + u[idx - sa]
    } else {
        (u[idx + sa + sb] - u[idx + sa - sb] - u[idx - sa + sb] + u[idx - sa - sb]) * T::lit(0.25)
    }
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

fn interior_terms(g: &GridMeta) -> usize {
    3 * g.dims.iter().map(|&d| d.saturating_sub(2)).product::<usize>()
}

fn pair_weight<T: Real>(p: usize) -> T {
    if p < 3 {
        T::one()
    } else {
        T::lit(2.0)
    }
}

/// Bending energy; zero when some axis has fewer than three voxels.
pub fn bending_energy<T: Real>(phi: &DisplacementField<T>) -> T {
    let g = *phi.grid();
    let count = interior_terms(&g);
    if count == 0 {
        return T::zero();
    }
    let [nx, ny, nz] = g.dims;
    let st = strides(g.dims);
    let planes: Vec<T> = (1..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut s = T::zero();
            for comp in phi.components() {
                for j in 1..ny - 1 {
                    let row = k * st[2] + j * st[1];
                    for idx in row + 1..row + nx - 1 {
                        for (p, &pair) in PAIRS.iter().enumerate() {
                            let d = second_diff(comp, idx, st, pair);
                            s += pair_weight::<T>(p) * d * d;
                        }
                    }
                }
            }
            s
        })
        .collect();
    planes.into_iter().fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(count)
}

/// `∂E/∂u`, the adjoint of the second-difference stencils applied to the
/// weighted residuals.
pub fn bending_energy_gradient<T: Real>(phi: &DisplacementField<T>) -> DisplacementField<T> {
    let g = *phi.grid();
    let count = interior_terms(&g);
    if count == 0 {
        return DisplacementField::zeros(g);
    }
    let [nx, ny, nz] = g.dims;
    let st = strides(g.dims);
    // residuals live on a grid padded by one voxel and are zero off the interior
    let pd = [nx + 2, ny + 2, nz + 2];
    let ps = strides(pd);
    let n = T::from_usize_lossy(count);
    let comps = [0, 1, 2].map(|c| {
        let u = phi.component(c);
        let residuals: Vec<Vec<T>> = PAIRS
            .iter()
            .enumerate()
            .map(|(p, &pair)| {
                // r_ab = (2 w_ab / N) D_ab u
                let w = T::lit(2.0) * pair_weight::<T>(p) / n;
                let mut r = vec![T::zero(); pd[0] * pd[1] * pd[2]];
                r.par_chunks_mut(ps[2]).enumerate().for_each(|(kp, plane)| {
                    if kp < 2 || kp + 2 > nz + 1 {
                        return;
                    }
                    let k = kp - 1;
                    for j in 1..ny - 1 {
                        let src = k * st[2] + j * st[1];
                        let dst = (j + 1) * ps[1] + 1;
                        for i in 1..nx - 1 {
                            plane[dst + i] = w * second_diff(u, src + i, st, pair);
                        }
                    }
                });
                r
            })
            .collect();
        // every D_ab is symmetric, so the adjoint is the same stencil
        let mut out = vec![T::zero(); g.len()];
        out.par_chunks_mut(st[2]).enumerate().for_each(|(k, plane)| {
            for j in 0..ny {
                let base = (k + 1) * ps[2] + (j + 1) * ps[1] + 1;
                for i in 0..nx {
                    let mut s = T::zero();
                    for (r, &pair) in residuals.iter().zip(PAIRS.iter()) {
                        s += second_diff(r, base + i, ps, pair);
                    }
                    plane[j * nx + i] = s;
                }
            }
        });
        out
    });
    DisplacementField::from_components_unchecked(g, comps)
}
