//! Scalar volumes, label masks and the preprocessing pipeline.
//!
//! Voxel data is stored with the first axis varying fastest, matching the
//! on-disk NIfTI order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;
use crate::scalar::Real;

/// Shape, voxel size (mm) and world position of voxel `(0, 0, 0)` (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = GridMeta { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {:?}", self.origin)));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    pub fn is_compatible(&self, other: &GridMeta) -> bool {
        self == other
    }

    pub fn check_compatible(&self, other: &GridMeta) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::Incompatible(format!("{self:?} vs {other:?}")))
        }
    }
}

/// A 3-D grid of real intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: GridMeta,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: GridMeta, data: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite intensity {bad}")));
        }
        Ok(Volume { grid, data })
    }

    pub(crate) fn from_parts_unchecked(grid: GridMeta, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Volume { grid, data }
    }

    pub fn filled(grid: GridMeta, value: T) -> Self {
        Volume { grid, data: vec![value; grid.len()] }
    }

    pub fn zeros(grid: GridMeta) -> Self {
        Self::filled(grid, T::zero())
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(grid: GridMeta, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    /// Trilinear sample at a continuous voxel index, clamped to the edge.
    #[inline]
    pub fn sample(&self, p: [T; 3]) -> T {
        interp::sample(&self.data, self.grid.dims, p)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Same data on a different grid with identical dims.
    pub fn with_grid(self, grid: GridMeta) -> Result<Self> {
        grid.validate()?;
        if grid.dims != self.grid.dims {
            return Err(Error::Incompatible(format!(
                "cannot restamp dims {:?} onto {:?}",
                self.grid.dims, grid.dims
            )));
        }
        Ok(Volume { grid, data: self.data })
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// A segmentation label with values in `[0, 1]`: binary on load, soft after
/// warping or filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask<T> {
    volume: Volume<T>,
}

impl<T: Real> LabelMask<T> {
    pub fn new(volume: Volume<T>) -> Result<Self> {
        if let Some(bad) = volume.data.iter().find(|&&v| v < T::zero() || v > T::one()) {
            return Err(Error::InvalidData(format!("label value {bad} outside [0, 1]")));
        }
        Ok(LabelMask { volume })
    }

    /// Clamps every value into `[0, 1]`.
    pub fn from_volume_clamped(volume: Volume<T>) -> Self {
        LabelMask { volume: volume.map(|v| v.max(T::zero()).min(T::one())) }
    }

    /// Any nonzero value becomes 1.
    pub fn from_volume_nonzero(volume: &Volume<T>) -> Self {
        LabelMask { volume: volume.map(|v| if v != T::zero() { T::one() } else { T::zero() }) }
    }

    pub fn from_fn(grid: GridMeta, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        LabelMask { volume: Volume::from_fn(grid, |p| if f(p) { T::one() } else { T::zero() }) }
    }

    pub fn as_volume(&self) -> &Volume<T> {
        &self.volume
    }

    pub fn into_volume(self) -> Volume<T> {
        self.volume
    }

    pub fn grid(&self) -> &GridMeta {
        &self.volume.grid
    }

    pub fn data(&self) -> &[T] {
        &self.volume.data
    }

    /// Values `>= threshold` become 1, the rest 0.
    pub fn binarized(&self, threshold: T) -> Self {
        LabelMask {
            volume: self.volume.map(|v| if v >= threshold { T::one() } else { T::zero() }),
        }
    }

    pub fn count_above(&self, threshold: T) -> usize {
        self.volume.data.iter().filter(|&&v| v >= threshold).count()
    }

    pub fn with_grid(self, grid: GridMeta) -> Result<Self> {
        Ok(LabelMask { volume: self.volume.with_grid(grid)? })
    }
}

/// Resamples onto an isotropic grid of `target_spacing` mm.
///
/// Output voxel centers are aligned to the physical extent of the input, so
/// output voxel `j` samples input index `(j + 0.5) * t / s - 0.5`.
pub fn resample_isotropic<T: Real>(v: &Volume<T>, target_spacing: f64) -> Result<Volume<T>> {
    if !(target_spacing.is_finite() && target_spacing > 0.0) {
        return Err(Error::InvalidGrid(format!("target spacing must be positive, got {target_spacing}")));
    }
    let g = v.grid;
    let mut dims = [0usize; 3];
    let mut scale = [0.0f64; 3];
    let mut origin = [0.0f64; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a] / target_spacing;
        // tolerate representation noise like 64 * 5 / 5 = 64.0000000001
        let rounded = extent.round();
        dims[a] = if (extent - rounded).abs() < 1e-9 { rounded as usize } else { extent.ceil() as usize }.max(1);
        scale[a] = target_spacing / g.spacing[a];
        origin[a] = g.origin[a] + 0.5 * target_spacing - 0.5 * g.spacing[a];
    }
    let out_grid = GridMeta::new(dims, [target_spacing; 3], origin)?;
    if out_grid.dims == g.dims && scale.iter().all(|&s| s == 1.0) {
        return Ok(Volume { grid: out_grid, data: v.data.clone() });
    }
    let half = T::lit(0.5);
    let sc = scale.map(T::lit);
    let data = Volume::<T>::from_fn(out_grid, |[i, j, k]| {
        let p = [
            (T::from_usize_lossy(i) + half) * sc[0] - half,
            (T::from_usize_lossy(j) + half) * sc[1] - half,
            (T::from_usize_lossy(k) + half) * sc[2] - half,
        ];
        v.sample(p)
    })
    .data;
    Ok(Volume { grid: out_grid, data })
}

/// Axis-aligned box of voxel indices `[start, start + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

impl Roi {
    /// Tight bounding box of voxels `> 0.5`, dilated by `margin` voxels and
    /// clipped to the grid.
    pub fn from_mask<T: Real>(mask: &LabelMask<T>, margin: usize) -> Result<Roi> {
        let g = *mask.grid();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let half = T::lit(0.5);
        let mut any = false;
        for (idx, &v) in mask.data().iter().enumerate() {
            if v > half {
                any = true;
                let c = g.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if !any {
            return Err(Error::EmptyRoi);
        }
        let mut start = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            start[a] = lo[a].saturating_sub(margin);
            let end = (hi[a] + margin).min(g.dims[a] - 1);
            size[a] = end - start[a] + 1;
        }
        Ok(Roi { start, size })
    }

    pub fn full(grid: &GridMeta) -> Roi {
        Roi { start: [0; 3], size: grid.dims }
    }
}

/// Output of [`crop_pad`].
#[derive(Clone, Debug)]
pub struct CropPad<T> {
    pub volume: Volume<T>,
    /// Set when the ROI exceeded `out_dims` on some axis and was center-cropped.
    pub overflow: bool,
}

/// Copies `roi` into the center of an `out_dims` grid filled with `pad_value`.
///
/// World coordinates of retained voxels are preserved through the origin.
pub fn crop_pad<T: Real>(v: &Volume<T>, roi: &Roi, out_dims: [usize; 3], pad_value: T) -> Result<CropPad<T>> {
    let g = v.grid;
    for a in 0..3 {
        if roi.size[a] == 0 || roi.start[a] + roi.size[a] > g.dims[a] {
            return Err(Error::InvalidGrid(format!("roi {roi:?} outside dims {:?}", g.dims)));
        }
    }
    let mut overflow = false;
    // src_start/dst_start/len per axis
    let mut src = [0usize; 3];
    let mut dst = [0usize; 3];
    let mut len = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        if roi.size[a] <= out_dims[a] {
            src[a] = roi.start[a];
            dst[a] = out_dims[a] / 2 - roi.size[a] / 2;
            len[a] = roi.size[a];
        } else {
            overflow = true;
            src[a] = roi.start[a] + (roi.size[a] - out_dims[a]) / 2;
            dst[a] = 0;
            len[a] = out_dims[a];
        }
        origin[a] = g.origin[a] + (src[a] as f64 - dst[a] as f64) * g.spacing[a];
    }
    let out_grid = GridMeta::new(out_dims, g.spacing, origin)?;
    let mut data = vec![pad_value; out_grid.len()];
    for k in 0..len[2] {
        for j in 0..len[1] {
            let s = g.index(src[0], src[1] + j, src[2] + k);
            let d = out_grid.index(dst[0], dst[1] + j, dst[2] + k);
            data[d..d + len[0]].copy_from_slice(&v.data[s..s + len[0]]);
        }
    }
    Ok(CropPad { volume: Volume { grid: out_grid, data }, overflow })
}

/// Affinely maps intensities onto `[0, 1]`, clamping to `clip` first when given.
pub fn normalize_minmax<T: Real>(v: &Volume<T>, clip: Option<(T, T)>) -> Result<Volume<T>> {
    let (lo, hi) = match clip {
        Some((lo, hi)) => {
            if !(lo < hi) {
                return Err(Error::Config(format!("clip range ({lo}, {hi}) is empty")));
            }
            (lo, hi)
        }
        None => {
            let (lo, hi) = v.min_max();
            if lo == hi {
                return Err(Error::DegenerateRange(lo.as_f64()));
            }
            (lo, hi)
        }
    };
    let range = hi - lo;
    Ok(v.map(|x| (x.max(lo).min(hi) - lo) / range))
}

/// Settings for the resample / crop / pad / normalize pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// When false only intensity normalization is applied.
    pub enabled: bool,
    pub target_spacing: f64,
    pub out_dims: [usize; 3],
    pub roi_margin: usize,
    pub fixed_pad_value: f64,
    pub moving_pad_value: f64,
    pub fixed_clip: Option<(f64, f64)>,
    pub moving_clip: Option<(f64, f64)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            enabled: true,
            target_spacing: 5.0,
            out_dims: [128, 128, 128],
            roi_margin: 2,
            fixed_pad_value: 0.0,
            moving_pad_value: 0.0,
            fixed_clip: None,
            moving_clip: None,
        }
    }
}

/// An image and its label after preprocessing.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub image: Volume<T>,
    pub label: LabelMask<T>,
    pub roi: Roi,
    pub overflow: bool,
}

/// Runs resample → ROI crop/pad → normalization on one image/label pair.
///
/// Labels are resampled trilinearly and re-binarized at 0.5. The image is
/// normalized after padding so the pad value takes part in the intensity range.
pub fn preprocess<T: Real>(
    image: &Volume<T>,
    label: &LabelMask<T>,
    pad_value: f64,
    clip: Option<(f64, f64)>,
    cfg: &PreprocessConfig,
) -> Result<Prepared<T>> {
    image.grid().check_compatible(label.grid())?;
    let clip_t = clip.map(|(lo, hi)| (T::lit(lo), T::lit(hi)));
    if !cfg.enabled {
        return Ok(Prepared {
            image: normalize_minmax(image, clip_t)?,
            label: label.clone(),
            roi: Roi::full(image.grid()),
            overflow: false,
        });
    }
    let img = resample_isotropic(image, cfg.target_spacing)?;
    let lab = resample_isotropic(label.as_volume(), cfg.target_spacing)?;
    let lab = LabelMask::from_volume_clamped(lab).binarized(T::lit(0.5));
    let roi = Roi::from_mask(&lab, cfg.roi_margin)?;
    let img = crop_pad(&img, &roi, cfg.out_dims, T::lit(pad_value))?;
    let lab_c = crop_pad(lab.as_volume(), &roi, cfg.out_dims, T::zero())?;
    Ok(Prepared {
        image: normalize_minmax(&img.volume, clip_t)?,
        label: LabelMask::from_volume_clamped(lab_c.volume),
        roi,
        overflow: img.overflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3]) -> GridMeta {
        GridMeta::with_dims(d).unwrap()
    }

    #[test]
    fn volume_rejects_bad_input() {
        assert!(Volume::new(grid([2, 2, 2]), vec![0.0f64; 7]).is_err());
        assert!(Volume::new(grid([1, 1, 2]), vec![0.0f64, f64::NAN]).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(GridMeta::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
        let v = Volume::new(grid([1, 1, 2]), vec![0.0, 2.0]).unwrap();
        assert!(LabelMask::new(v).is_err());
    }

    #[test]
    fn resample_identity_when_spacing_matches() {
        let g = GridMeta::new([4, 3, 2], [5.0; 3], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume::from_fn(g, |[i, j, k]| (i * 7 + j * 3 + k) as f64);
        let r = resample_isotropic(&v, 5.0).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_center_aligned_two_voxels() {
        let v = Volume::new(grid([2, 1, 1]), vec![0.0, 10.0]).unwrap();
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.dims(), [4, 2, 2]);
        let row: Vec<f64> = (0..4).map(|i| r.get(i, 0, 0)).collect();
        assert_eq!(row, vec![0.0, 2.5, 7.5, 10.0]);
        assert_eq!(r.grid().spacing, [0.5; 3]);
        assert!((r.grid().origin[0] - (-0.25)).abs() < 1e-12);
    }

    #[test]
    fn resample_constant_is_constant() {
        let g = GridMeta::new([5, 4, 3], [1.0, 2.0, 3.5], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 3.25f64);
        for t in [0.7, 1.0, 2.5, 4.0] {
            let r = resample_isotropic(&v, t).unwrap();
            assert!(r.data().iter().all(|&x| x == 3.25));
        }
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn crop_pad_single_voxel_centers() {
        let g = grid([8, 8, 8]);
        let mask = LabelMask::<f64>::from_fn(g, |p| p == [3, 3, 3]);
        let roi = Roi::from_mask(&mask, 0).unwrap();
        assert_eq!(roi, Roi { start: [3, 3, 3], size: [1, 1, 1] });
        let v = Volume::from_fn(g, |[i, j, k]| (i + 10 * j + 100 * k) as f64);
        let out = crop_pad(&v, &roi, [4, 4, 4], -1.0).unwrap();
        assert!(!out.overflow);
        let o = &out.volume;
        assert_eq!(o.get(2, 2, 2), 333.0);
        let pads = o.data().iter().filter(|&&x| x == -1.0).count();
        assert_eq!(pads, 63);
        // world position of the kept voxel is unchanged
        assert_eq!(o.grid().origin, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn crop_pad_whole_volume_identity() {
        let g = GridMeta::new([5, 6, 7], [2.0; 3], [3.0, -1.0, 0.5]).unwrap();
        let v = Volume::from_fn(g, |[i, j, k]| (i * j + k) as f64);
        let mask = LabelMask::<f64>::from_fn(g, |_| true);
        let roi = Roi::from_mask(&mask, 2).unwrap();
        let out = crop_pad(&v, &roi, g.dims, 0.0).unwrap();
        assert_eq!(out.volume, v);
    }

    #[test]
    fn crop_pad_fill_value_and_overflow() {
        let g = grid([6, 6, 6]);
        let v = Volume::filled(g, 5.0f64);
        let roi = Roi { start: [1, 1, 1], size: [2, 2, 2] };
        let out = crop_pad(&v, &roi, [6, 6, 6], -1000.0).unwrap();
        assert_eq!(out.volume.data().iter().filter(|&&x| x == -1000.0).count(), 216 - 8);
        let big = crop_pad(&v, &Roi::full(&g), [4, 4, 4], 0.0).unwrap();
        assert!(big.overflow);
        assert_eq!(big.volume.dims(), [4, 4, 4]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mask = LabelMask::<f64>::from_fn(grid([3, 3, 3]), |_| false);
        assert!(matches!(Roi::from_mask(&mask, 2), Err(Error::EmptyRoi)));
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::from_fn(grid([101, 1, 1]), |[i, _, _]| i as f64);
        let n = normalize_minmax(&v, None).unwrap();
        assert_eq!(n.get(0, 0, 0), 0.0);
        assert_eq!(n.get(100, 0, 0), 1.0);
        assert_eq!(n.get(50, 0, 0), 0.5);

        let c = Volume::filled(grid([2, 2, 2]), 4.0f64);
        assert!(matches!(normalize_minmax(&c, None), Err(Error::DegenerateRange(_))));
        let cc = normalize_minmax(&c, Some((0.0, 1.0))).unwrap();
        assert!(cc.data().iter().all(|&x| x == 1.0));

        let ct = Volume::new(grid([3, 1, 1]), vec![-1000.0, 500.0, -250.0]).unwrap();
        let n = normalize_minmax(&ct, Some((-1000.0, 500.0))).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn preprocess_pipeline_shapes() {
        let g = GridMeta::new([20, 20, 10], [2.5, 2.5, 5.0], [0.0; 3]).unwrap();
        let img = Volume::from_fn(g, |[i, j, k]| (i + j + k) as f64);
        let lab = LabelMask::from_fn(g, |[i, j, k]| (6..14).contains(&i) && (5..12).contains(&j) && (3..7).contains(&k));
        let cfg = PreprocessConfig { out_dims: [16, 16, 16], ..Default::default() };
        let p = preprocess(&img, &lab, 0.0, None, &cfg).unwrap();
        assert_eq!(p.image.dims(), [16, 16, 16]);
        assert_eq!(p.image.grid().spacing, [5.0; 3]);
        let (lo, hi) = p.image.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(p.label.count_above(0.5) > 0);
    }
}
