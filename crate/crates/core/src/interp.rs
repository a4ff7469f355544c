//! Trilinear sampling with clamp-to-edge boundaries.
//!
//! Positions are continuous voxel indices. A position outside `[0, n-1]` on an
//! axis is clamped onto the edge, so the interpolant is constant there and its
//! derivative along that axis is zero.

use crate::scalar::Real;

#[inline]
fn axis_cell<T: Real>(p: T, n: usize) -> (usize, T, bool) {
    if n < 2 {
        return (0, T::zero(), false);
    }
    let hi = T::from_usize_lossy(n - 1);
    if p <= T::zero() {
        return (0, T::zero(), p == T::zero());
    }
    if p >= hi {
        return (n - 2, T::one(), p == hi);
    }
    let fl = p.floor();
    let i0 = fl.to_usize().unwrap_or(0).min(n - 2);
    (i0, p - T::from_usize_lossy(i0), true)
}

/// `a + f (b − a)`, exact when `a == b` and at both ends.
#[inline(always)]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    if f == T::one() {
        b
    } else {
        a + f * (b - a)
    }
}

/// The trilinear cell containing a position, reusable across several volumes
/// on the same grid.
#[derive(Clone, Copy, Debug)]
pub struct Cell<T> {
    base: usize,
    strides: [usize; 3],
    frac: [T; 3],
    inside: [bool; 3],
}

impl<T: Real> Cell<T> {
    #[inline]
    pub fn locate(dims: [usize; 3], p: [T; 3]) -> Self {
        let (i, fx, ix) = axis_cell(p[0], dims[0]);
        let (j, fy, iy) = axis_cell(p[1], dims[1]);
        let (k, fz, iz) = axis_cell(p[2], dims[2]);
        let sx = if dims[0] > 1 { 1 } else { 0 };
        let sy = if dims[1] > 1 { dims[0] } else { 0 };
        let sz = if dims[2] > 1 { dims[0] * dims[1] } else { 0 };
        Cell { base: i + dims[0] * (j + dims[1] * k), strides: [sx, sy, sz], frac: [fx, fy, fz], inside: [ix, iy, iz] }
    }

    #[inline]
    fn corners(&self, data: &[T]) -> [T; 8] {
        let [sx, sy, sz] = self.strides;
        let b = self.base;
        [
            data[b],
            data[b + sx],
            data[b + sy],
            data[b + sx + sy],
            data[b + sz],
            data[b + sx + sz],
            data[b + sy + sz],
            data[b + sx + sy + sz],
        ]
    }

    #[inline]
    pub fn value(&self, data: &[T]) -> T {
        let [c000, c100, c010, c110, c001, c101, c011, c111] = self.corners(data);
        let [fx, fy, fz] = self.frac;
        let c00 = lerp(c000, c100, fx);
        let c10 = lerp(c010, c110, fx);
        let c01 = lerp(c001, c101, fx);
        let c11 = lerp(c011, c111, fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Value and exact derivative of the interpolant with respect to the
    /// position.
    #[inline]
    pub fn value_and_gradient(&self, data: &[T]) -> (T, [T; 3]) {
        let [c000, c100, c010, c110, c001, c101, c011, c111] = self.corners(data);
        let [fx, fy, fz] = self.frac;
        let [ix, iy, iz] = self.inside;
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let c00 = lerp(c000, c100, fx);
        let c10 = lerp(c010, c110, fx);
        let c01 = lerp(c001, c101, fx);
        let c11 = lerp(c011, c111, fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let dx = if ix {
            lerp(lerp(d00, d10, fy), lerp(d01, d11, fy), fz)
        } else {
            T::zero()
        };
        let dy = if iy { lerp(c10 - c00, c11 - c01, fz) } else { T::zero() };
        let dz = if iz { c1 - c0 } else { T::zero() };
        (value, [dx, dy, dz])
    }
}

/// Samples `data` (x fastest) at continuous index `p`.
#[inline]
pub fn sample<T: Real>(data: &[T], dims: [usize; 3], p: [T; 3]) -> T {
    Cell::locate(dims, p).value(data)
}

/// Samples `data` at `p` and returns the value together with the exact
/// derivative of the trilinear interpolant with respect to `p`.
///
/// On an interior cell face the derivative of the cell starting at that face is
/// used; outside the domain along an axis the derivative along it is zero.
#[inline]
pub fn sample_with_gradient<T: Real>(data: &[T], dims: [usize; 3], p: [T; 3]) -> (T, [T; 3]) {
    Cell::locate(dims, p).value_and_gradient(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Vec<f64> {
        let mut v = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    v.push(2.0 * i as f64 - 3.0 * j as f64 + 0.5 * k as f64);
                }
            }
        }
        v
    }

    #[test]
    fn exact_on_linear_functions() {
        let dims = [5, 4, 6];
        let data = ramp(dims);
        let p = [1.3, 2.7, 4.1];
        let (v, g) = sample_with_gradient(&data, dims, p);
        assert!((v - (2.6 - 8.1 + 2.05)).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 3.0).abs() < 1e-12);
        assert!((g[2] - 0.5).abs() < 1e-12);
        assert_eq!(sample(&data, dims, p), v);
    }

    #[test]
    fn clamps_outside_domain() {
        let dims = [3, 3, 3];
        let data = ramp(dims);
        let (v, g) = sample_with_gradient(&data, dims, [-2.0, 0.0, 10.0]);
        assert_eq!(v, data[2 * 9]);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn grid_points_reproduce_data() {
        let dims = [4, 3, 2];
        let data = ramp(dims);
        for k in 0..2 {
            for j in 0..3 {
                for i in 0..4 {
                    let v = sample(&data, dims, [i as f64, j as f64, k as f64]);
                    assert_eq!(v, data[i + 4 * (j + 3 * k)]);
                }
            }
        }
    }

    #[test]
    fn degenerate_axes() {
        let dims = [2, 1, 1];
        let data = vec![0.0, 10.0];
        assert_eq!(sample(&data, dims, [0.25, 0.0, 0.0]), 2.5);
        assert_eq!(sample(&data, dims, [0.5, 3.0, -1.0]), 5.0);
    }
}
