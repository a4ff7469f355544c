//! Truncated, renormalized Gaussian kernels and separable 3-D filtering with
//! clamp-to-edge boundaries, together with the exact adjoint of the filter.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{LabelMask, Volume};

/// 1-D sampled Gaussian with radius `ceil(3σ)`, weights summing to one.
/// `σ = 0` is the identity kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel<T> {
    sigma: f64,
    radius: usize,
    weights: Vec<T>,
}

impl<T: Real> GaussianKernel<T> {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Config(format!("gaussian sigma must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(GaussianKernel { sigma, radius: 0, weights: vec![T::one()] });
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        // symmetric pairwise sum keeps weights[i] == weights[2r - i] after scaling
        let mut total = raw[radius];
        for i in 0..radius {
            total += 2.0 * raw[i];
        }
        let weights = raw.iter().map(|w| T::lit(w / total)).collect();
        Ok(GaussianKernel { sigma, radius, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Banded operator acting along one axis of length `n`. Every row and every
/// column touches a contiguous index range, stored as `(start, weights)`.
#[derive(Clone, Debug)]
struct AxisOperator<T> {
    rows: Vec<(usize, Vec<T>)>,
    cols: Vec<(usize, Vec<T>)>,
}

/// Contiguous nonzero range of each row of a dense `n × n` matrix.
fn bands<T: Real>(dense: &[T], n: usize, by_row: bool) -> Vec<(usize, Vec<T>)> {
    let at = |i: usize, j: usize| if by_row { dense[i * n + j] } else { dense[j * n + i] };
    (0..n)
        .map(|i| {
            let lo = (0..n).find(|&j| at(i, j) != T::zero()).unwrap_or(0);
            let hi = (0..n).rev().find(|&j| at(i, j) != T::zero()).unwrap_or(0);
            (lo, (lo..=hi).map(|j| at(i, j)).collect())
        })
        .collect()
}

impl<T: Real> AxisOperator<T> {
    /// `y[i] = Σ_t w[t] · x[clamp(i + t − r)]`, duplicate columns merged.
    fn clamped(kernel: &GaussianKernel<T>, n: usize) -> Self {
        let r = kernel.radius as isize;
        let mut dense = vec![T::zero(); n * n];
        for i in 0..n {
            for (t, &w) in kernel.weights.iter().enumerate() {
                let col = (i as isize + t as isize - r).clamp(0, n as isize - 1) as usize;
                dense[i * n + col] += w;
            }
        }
        AxisOperator { rows: bands(&dense, n, true), cols: bands(&dense, n, false) }
    }

    fn transpose(&self) -> Self {
        AxisOperator { rows: self.cols.clone(), cols: self.rows.clone() }
    }

    fn is_identity(&self) -> bool {
        self.rows.iter().enumerate().all(|(i, (s, w))| *s == i && w.len() == 1 && w[0] == T::one())
    }

    fn apply(&self, data: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
        let [nx, ny, _] = dims;
        let mut out = vec![T::zero(); data.len()];
        match axis {
            0 => {
                // scatter each input sample along its column band
                out.par_chunks_mut(nx).zip(data.par_chunks(nx)).for_each(|(o, line)| {
                    for (&x, (start, w)) in line.iter().zip(&self.cols) {
                        axpy(&mut o[*start..*start + w.len()], x, w);
                    }
                });
            }
            1 => {
                let slab = nx * ny;
                out.par_chunks_mut(slab).zip(data.par_chunks(slab)).for_each(|(o, src)| {
                    for (j, (start, w)) in self.rows.iter().enumerate() {
                        let dst = &mut o[j * nx..(j + 1) * nx];
                        for (c, &wc) in (*start..).zip(w) {
                            axpy(dst, wc, &src[c * nx..(c + 1) * nx]);
                        }
                    }
                });
            }
            _ => {
                let plane = nx * ny;
                out.par_chunks_mut(plane).zip(self.rows.par_iter()).for_each(|(dst, (start, w))| {
                    for (c, &wc) in (*start..).zip(w) {
                        axpy(dst, wc, &data[c * plane..(c + 1) * plane]);
                    }
                });
            }
        }
        out
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], w: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// A separable Gaussian filter bound to one grid shape.
#[derive(Clone, Debug)]
pub struct SeparableGaussian<T> {
    dims: [usize; 3],
    forward: [AxisOperator<T>; 3],
    adjoint: [AxisOperator<T>; 3],
    identity: bool,
}

impl<T: Real> SeparableGaussian<T> {
    pub fn new(sigma: f64, dims: [usize; 3]) -> Result<Self> {
        let k = GaussianKernel::<T>::new(sigma)?;
        let forward = dims.map(|n| AxisOperator::clamped(&k, n));
        let adjoint = [forward[0].transpose(), forward[1].transpose(), forward[2].transpose()];
        let identity = forward.iter().all(|op| op.is_identity());
        Ok(SeparableGaussian { dims, forward, adjoint, identity })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Filters `data` (first axis fastest).
    pub fn apply(&self, data: &[T]) -> Vec<T> {
        if self.identity {
            return data.to_vec();
        }
        let a = self.forward[0].apply(data, self.dims, 0);
        let b = self.forward[1].apply(&a, self.dims, 1);
        self.forward[2].apply(&b, self.dims, 2)
    }

    /// Applies the transpose of [`apply`](Self::apply). It differs from the
    /// forward filter only near the boundary, where clamping folds weight back.
    pub fn apply_adjoint(&self, data: &[T]) -> Vec<T> {
        if self.identity {
            return data.to_vec();
        }
        let a = self.adjoint[2].apply(data, self.dims, 2);
        let b = self.adjoint[1].apply(&a, self.dims, 1);
        self.adjoint[0].apply(&b, self.dims, 0)
    }
}

/// Separable Gaussian smoothing with clamp-to-edge boundaries.
pub fn gaussian_filter<T: Real>(v: &Volume<T>, sigma: f64) -> Result<Volume<T>> {
    if sigma == 0.0 {
        GaussianKernel::<T>::new(sigma)?;
        return Ok(v.clone());
    }
    let f = SeparableGaussian::new(sigma, v.dims())?;
    Ok(Volume::from_parts_unchecked(*v.grid(), f.apply(v.data())))
}

pub fn gaussian_filter_label<T: Real>(m: &LabelMask<T>, sigma: f64) -> Result<LabelMask<T>> {
    Ok(LabelMask::from_volume_clamped(gaussian_filter(m.as_volume(), sigma)?))
}
