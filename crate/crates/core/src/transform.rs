//! Displacement-field algebra: affine rasterization, trilinear warping,
//! recursive composition and Jacobian diagnostics.
//!
//! Displacements are in voxel units of the fixed grid: the point at voxel
//! index `x` maps to `x + u(x)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;
use crate::nifti::{self, NiftiHeader};
use crate::par;
use crate::scalar::Real;
use crate::volume::{GridMeta, LabelMask, Volume};

/// Per-voxel real values on a grid (e.g. Jacobian determinants, gradients).
pub type ScalarField<T> = Volume<T>;

/// 12 affine parameters as a 3×4 matrix `[A | t]` acting on voxel indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams<T> {
    pub matrix: [[T; 4]; 3],
}

impl<T: Real> AffineParams<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        AffineParams { matrix: [[o, z, z, z], [z, o, z, z], [z, z, o, z]] }
    }

    pub fn translation(t: [T; 3]) -> Self {
        let mut a = Self::identity();
        for r in 0..3 {
            a.matrix[r][3] = t[r];
        }
        a
    }

    /// Row-major `[a00 a01 a02 t0 a10 … t2]`.
    pub fn from_slice(p: &[T]) -> Result<Self> {
        if p.len() != 12 {
            return Err(Error::Config(format!("affine needs 12 parameters, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite affine parameter".into()));
        }
        let mut m = [[T::zero(); 4]; 3];
        for r in 0..3 {
            m[r].copy_from_slice(&p[4 * r..4 * r + 4]);
        }
        Ok(AffineParams { matrix: m })
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.matrix.iter().flatten().copied().collect()
    }

    #[inline]
    pub fn apply(&self, x: [T; 3]) -> [T; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|r| m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2] + m[r][3])
    }

    pub fn determinant(&self) -> T {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Dense per-voxel 3-vector displacement field, stored one component per array.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    grid: GridMeta,
    comps: [Vec<T>; 3],
}

impl<T: Real> DisplacementField<T> {
    pub fn zeros(grid: GridMeta) -> Self {
        let n = grid.len();
        DisplacementField { grid, comps: [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]] }
    }

    pub fn from_components(grid: GridMeta, comps: [Vec<T>; 3]) -> Result<Self> {
        grid.validate()?;
        if comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::InvalidData("field component length does not match grid".into()));
        }
        if comps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite displacement".into()));
        }
        Ok(DisplacementField { grid, comps })
    }

    pub(crate) fn from_components_unchecked(grid: GridMeta, comps: [Vec<T>; 3]) -> Self {
        DisplacementField { grid, comps }
    }

    pub fn from_fn(grid: GridMeta, f: impl Fn([usize; 3]) -> [T; 3] + Sync + Send) -> Self {
        let comps = par::map_indices_split(grid.len(), |idx| f(grid.coords(idx)));
        DisplacementField { grid, comps }
    }

    /// Builds a field from a flat parameter vector laid out component-major.
    pub fn from_flat(grid: GridMeta, flat: &[T]) -> Result<Self> {
        let n = grid.len();
        if flat.len() != 3 * n {
            return Err(Error::InvalidData(format!("expected {} values, got {}", 3 * n, flat.len())));
        }
        Self::from_components(grid, [flat[..n].to_vec(), flat[n..2 * n].to_vec(), flat[2 * n..].to_vec()])
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.comps.iter().flatten().copied().collect()
    }

    #[inline]
    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[T] {
        &self.comps[c]
    }

    pub fn components(&self) -> &[Vec<T>; 3] {
        &self.comps
    }

    pub fn into_components(self) -> [Vec<T>; 3] {
        self.comps
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [T; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    /// Trilinear, clamp-to-edge sample of every component.
    #[inline]
    pub fn sample(&self, p: [T; 3]) -> [T; 3] {
        let cell = interp::Cell::locate(self.grid.dims, p);
        [0, 1, 2].map(|c| cell.value(&self.comps[c]))
    }

    /// Root-mean-square displacement magnitude in voxels.
    pub fn rms(&self) -> f64 {
        let n = self.grid.len();
        let ss: f64 = (0..n)
            .map(|i| self.comps.iter().map(|c| c[i].as_f64().powi(2)).sum::<f64>())
            .sum();
        (ss / n as f64).sqrt()
    }

    pub fn max_norm(&self) -> T {
        (0..self.grid.len())
            .map(|i| {
                let u = self.at(i);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .fold(T::zero(), T::max)
    }

    pub fn scaled(&self, s: T) -> Self {
        DisplacementField { grid: self.grid, comps: self.comps.clone().map(|c| c.into_iter().map(|v| v * s).collect()) }
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            grid: self.grid,
            comps: [0, 1, 2].map(|c| self.comps[c].iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }
}

#[inline]
fn index_point<T: Real>(c: [usize; 3]) -> [T; 3] {
    c.map(T::from_usize_lossy)
}

/// Rasterizes `u(x) = (A·x + t) − x` on `grid`.
pub fn affine_to_field<T: Real>(a: &AffineParams<T>, grid: &GridMeta) -> DisplacementField<T> {
    DisplacementField::from_fn(*grid, |c| {
        let x = index_point::<T>(c);
        let y = a.apply(x);
        [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
    })
}

/// `out(x) = v(x + u(x))`, trilinear with clamp-to-edge.
pub fn warp<T: Real>(v: &Volume<T>, phi: &DisplacementField<T>) -> Result<Volume<T>> {
    v.grid().check_compatible(phi.grid())?;
    let g = *v.grid();
    let data = par::map_indices(g.len(), |idx| {
        let x = index_point::<T>(g.coords(idx));
        let u = phi.at(idx);
        v.sample([x[0] + u[0], x[1] + u[1], x[2] + u[2]])
    });
    Ok(Volume::from_parts_unchecked(g, data))
}

/// Warps a label; the result stays within `[0, 1]`.
pub fn warp_label<T: Real>(m: &LabelMask<T>, phi: &DisplacementField<T>) -> Result<LabelMask<T>> {
    Ok(LabelMask::from_volume_clamped(warp(m.as_volume(), phi)?))
}

/// Warped values together with the spatial gradient of the interpolant of `v`
/// evaluated at the warped positions (one array per axis).
pub fn warp_with_gradient<T: Real>(v: &Volume<T>, phi: &DisplacementField<T>) -> Result<(Volume<T>, [Vec<T>; 3])> {
    v.grid().check_compatible(phi.grid())?;
    let g = *v.grid();
    let [values, gx, gy, gz] = par::map_indices_split(g.len(), |idx| {
        let x = index_point::<T>(g.coords(idx));
        let u = phi.at(idx);
        let (s, d) = interp::sample_with_gradient(v.data(), g.dims, [x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
        [s, d[0], d[1], d[2]]
    });
    Ok((Volume::from_parts_unchecked(g, values), [gx, gy, gz]))
}

/// [`warp_with_gradient`] for two volumes on the same grid, sharing the cell
/// lookup.
pub(crate) fn warp_pair_with_gradient<T: Real>(
    a: &Volume<T>,
    b: &Volume<T>,
    phi: &DisplacementField<T>,
) -> Result<[(Volume<T>, [Vec<T>; 3]); 2]> {
    a.grid().check_compatible(phi.grid())?;
    b.grid().check_compatible(phi.grid())?;
    let g = *a.grid();
    let [va, ax, ay, az, vb, bx, by, bz] = par::map_indices_split(g.len(), |idx| {
        let x = index_point::<T>(g.coords(idx));
        let u = phi.at(idx);
        let cell = interp::Cell::locate(g.dims, [x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
        let (sa, da) = cell.value_and_gradient(a.data());
        let (sb, db) = cell.value_and_gradient(b.data());
        [sa, da[0], da[1], da[2], sb, db[0], db[1], db[2]]
    });
    Ok([
        (Volume::from_parts_unchecked(g, va), [ax, ay, az]),
        (Volume::from_parts_unchecked(g, vb), [bx, by, bz]),
    ])
}

/// `out(x) = prev(x + inc(x)) + inc(x)`.
pub fn compose<T: Real>(prev: &DisplacementField<T>, inc: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    prev.grid().check_compatible(inc.grid())?;
    let g = *prev.grid();
    let comps = par::map_indices_split(g.len(), |idx| {
        let x = index_point::<T>(g.coords(idx));
        let d = inc.at(idx);
        let s = prev.sample([x[0] + d[0], x[1] + d[1], x[2] + d[2]]);
        [s[0] + d[0], s[1] + d[1], s[2] + d[2]]
    });
    Ok(DisplacementField::from_components_unchecked(g, comps))
}

/// Composition plus the Jacobian of the sampled `prev` interpolant with
/// respect to the sample point, as nine arrays in row-major order.
pub(crate) fn compose_with_jacobian<T: Real>(
    prev: &DisplacementField<T>,
    inc: &DisplacementField<T>,
) -> Result<(DisplacementField<T>, [Vec<T>; 9])> {
    prev.grid().check_compatible(inc.grid())?;
    let g = *prev.grid();
    let [c0, c1, c2, j0, j1, j2, j3, j4, j5, j6, j7, j8] = par::map_indices_split(g.len(), |idx| {
        let x = index_point::<T>(g.coords(idx));
        let d = inc.at(idx);
        let cell = interp::Cell::locate(g.dims, [x[0] + d[0], x[1] + d[1], x[2] + d[2]]);
        let (s0, r0) = cell.value_and_gradient(&prev.comps[0]);
        let (s1, r1) = cell.value_and_gradient(&prev.comps[1]);
        let (s2, r2) = cell.value_and_gradient(&prev.comps[2]);
        [d[0] + s0, d[1] + s1, d[2] + s2, r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r2[0], r2[1], r2[2]]
    });
    Ok((DisplacementField::from_components_unchecked(g, [c0, c1, c2]), [j0, j1, j2, j3, j4, j5, j6, j7, j8]))
}

/// Approximate inverse by fixed-point iteration `v(x) = −u(x + v(x))`, so that
/// `compose(u, v)` is close to zero where the inverse stays inside the grid.
pub fn invert_field<T: Real>(u: &DisplacementField<T>, iterations: usize) -> DisplacementField<T> {
    let g = *u.grid();
    let mut v = DisplacementField::zeros(g);
    for _ in 0..iterations {
        let next = par::map_indices_split(g.len(), |idx| {
            let x = index_point::<T>(g.coords(idx));
            let d = v.at(idx);
            let s = u.sample([x[0] + d[0], x[1] + d[1], x[2] + d[2]]);
            [-s[0], -s[1], -s[2]]
        });
        v = DisplacementField::from_components_unchecked(g, next);
    }
    v
}

/// Finite-difference derivative of `data` along `axis` at `idx`: central in the
/// interior, one-sided on the boundary, zero on a singleton axis.
#[inline]
fn diff_axis<T: Real>(data: &[T], g: &GridMeta, c: [usize; 3], idx: usize, axis: usize) -> T {
    let n = g.dims[axis];
    if n < 2 {
        return T::zero();
    }
    let stride = match axis {
        0 => 1,
        1 => g.dims[0],
        _ => g.dims[0] * g.dims[1],
    };
    let i = c[axis];
    if i == 0 {
        data[idx + stride] - data[idx]
    } else if i == n - 1 {
        data[idx] - data[idx - stride]
    } else {
        (data[idx + stride] - data[idx - stride]) * T::lit(0.5)
    }
}

/// `∂v/∂x_a` for each axis, in voxel units.
pub fn spatial_gradient<T: Real>(v: &Volume<T>) -> [ScalarField<T>; 3] {
    let g = *v.grid();
    [0, 1, 2].map(|a| {
        let d = par::map_indices(g.len(), |idx| diff_axis(v.data(), &g, g.coords(idx), idx, a));
        Volume::from_parts_unchecked(g, d)
    })
}

/// `det(I + ∇u)` at every voxel.
pub fn jacobian_determinant<T: Real>(phi: &DisplacementField<T>) -> ScalarField<T> {
    let g = *phi.grid();
    let det = par::map_indices(g.len(), |idx| {
        let c = g.coords(idx);
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (a, e) in row.iter_mut().enumerate() {
                *e = diff_axis(&phi.comps[r], &g, c, idx, a);
            }
            row[r] += T::one();
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    });
    Volume::from_parts_unchecked(g, det)
}

/// Fraction of voxels whose Jacobian determinant is negative.
pub fn fraction_negative_jacobian<T: Real>(phi: &DisplacementField<T>) -> f64 {
    let j = jacobian_determinant(phi);
    let neg = j.data().iter().filter(|&&d| d < T::zero()).count();
    neg as f64 / j.data().len() as f64
}

/// JSON sidecar describing a serialized displacement field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub grid: GridMeta,
    pub components: usize,
    pub units: String,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
}

impl FieldSidecar {
    fn for_grid(grid: GridMeta) -> Self {
        FieldSidecar {
            grid,
            components: 3,
            units: "voxel".into(),
            dtype: "float32".into(),
            byte_order: "little".into(),
            layout: "component-major; within a component the first axis varies fastest".into(),
        }
    }
}

/// Path of the JSON sidecar written next to a field file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes a 4-D float32 NIfTI (`dims × 3`) and its JSON sidecar.
pub fn write_field<T: Real>(phi: &DisplacementField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let hdr = NiftiHeader::float32(phi.grid(), Some(3));
    nifti::write_raw(path, &hdr, phi.comps.iter().flatten().map(|v| v.as_f64() as f32))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&FieldSidecar::for_grid(*phi.grid()))
        .map_err(|e| Error::Json { path: side.clone(), source: e })?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Reads a field written by [`write_field`]. Grid metadata comes from the
/// sidecar when present, otherwise from the header.
pub fn read_field<T: Real>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    let path = path.as_ref();
    let (hdr, data) = nifti::read_raw(path)?;
    if hdr.dim[0] < 4 || hdr.dim[4] != 3 || hdr.dim[5..].iter().take(hdr.dim[0] as usize - 4).any(|&d| d > 1) {
        return Err(Error::Format { path: path.to_path_buf(), msg: "expected a dims × 3 vector field".into() });
    }
    let side = sidecar_path(path);
    let grid = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let s: FieldSidecar = serde_json::from_str(&text).map_err(|e| Error::Json { path: side.clone(), source: e })?;
        s.grid
    } else {
        hdr.grid()?
    };
    DisplacementField::from_flat(grid, &data.into_iter().map(T::lit).collect::<Vec<_>>())
}
