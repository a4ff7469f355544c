//! Synthetic two-modality thorax phantoms with a known smooth deformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::gaussian::gaussian_filter;
use crate::scalar::Real;
use crate::transform::{jacobian_determinant, warp, warp_label, DisplacementField};
use crate::volume::{GridMeta, LabelMask, Volume};

/// Smallest Jacobian determinant accepted for a generated ground-truth field.
pub const MIN_JACOBIAN: f64 = 0.05;
pub const MAX_FIELD_ATTEMPTS: u64 = 20;

const STREAM_ANATOMY: u64 = 1;
const STREAM_NOISE_A: u64 = 2;
const STREAM_NOISE_B: u64 = 3;
const STREAM_FIELD: u64 = 16;

/// Intensity transfer turning the modality-A render into modality B.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IntensityMap {
    /// `v ↦ (1 − v)^gamma`
    InvertedGamma { gamma: f64 },
}

impl Default for IntensityMap {
    fn default() -> Self {
        IntensityMap::InvertedGamma { gamma: 1.5 }
    }
}

impl IntensityMap {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            IntensityMap::InvertedGamma { gamma } => (1.0 - v.clamp(0.0, 1.0)).powf(gamma),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    /// Voxel spacing written into the grid metadata, mm.
    pub spacing: f64,
    pub lung_count: usize,
    /// Maximum ground-truth displacement, voxels.
    pub deformation_amplitude: f64,
    /// Smoothing σ of the ground-truth field, voxels.
    pub deformation_smoothness: f64,
    pub noise_sigma: f64,
    pub intensity_map: IntensityMap,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64; 3],
            spacing: 5.0,
            lung_count: 2,
            deformation_amplitude: 4.0,
            deformation_smoothness: 8.0,
            noise_sigma: 0.02,
            intensity_map: IntensityMap::default(),
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("phantom dims must be >= 4 per axis, got {:?}", self.dims)));
        }
        if !(self.deformation_amplitude >= 0.0 && self.deformation_amplitude.is_finite()) {
            return Err(Error::Config("deformation_amplitude must be >= 0".into()));
        }
        if !(self.deformation_smoothness > 0.0 && self.deformation_smoothness.is_finite()) {
            return Err(Error::Config("deformation_smoothness must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.spacing > 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0 and spacing > 0".into()));
        }
        if !(1..=2).contains(&self.lung_count) {
            return Err(Error::Config("lung_count must be 1 or 2".into()));
        }
        let IntensityMap::InvertedGamma { gamma } = self.intensity_map;
        if !(gamma > 0.0) {
            return Err(Error::Config("intensity map gamma must be > 0".into()));
        }
        Ok(())
    }

    fn grid(&self) -> Result<GridMeta> {
        GridMeta::new(self.dims, [self.spacing; 3], [0.0; 3])
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase<T> {
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub fixed_label: LabelMask<T>,
    pub moving_label: LabelMask<T>,
    /// `moving = warp(modality-B render, true_field)`.
    pub true_field: DisplacementField<T>,
    pub seed: u64,
    pub params: PhantomParams,
}

/// The undeformed anatomy: modality A, modality B and the lung label, all on
/// the fixed grid.
#[derive(Clone, Debug)]
pub struct Anatomy<T> {
    pub modality_a: Volume<T>,
    pub modality_b: Volume<T>,
    pub label: LabelMask<T>,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

struct Layout {
    body: Ellipsoid,
    lungs: Vec<Ellipsoid>,
    heart: Ellipsoid,
    spine: Ellipsoid,
    vessels: Vec<Ellipsoid>,
}

const BACKGROUND: f64 = 0.0;
const SOFT_TISSUE: f64 = 0.55;
const LUNG: f64 = 0.12;
const VESSEL: f64 = 0.75;
const HEART: f64 = 0.68;
const BONE: f64 = 0.95;

fn layout(dims: [usize; 3], lung_count: usize, r: &mut ChaCha8Rng) -> Layout {
    let n = dims.map(|d| d as f64);
    let c = n.map(|d| (d - 1.0) / 2.0);
    let mut jitter = |s: f64| 1.0 + s * (r.random::<f64>() * 2.0 - 1.0);
    let body = Ellipsoid {
        center: c,
        radii: [0.44 * n[0] * jitter(0.03), 0.36 * n[1] * jitter(0.03), 0.46 * n[2]],
    };
    let mut lungs = Vec::new();
    for side in [-1.0, 1.0].into_iter().take(lung_count) {
        let side = if lung_count == 1 { 0.0 } else { side };
        lungs.push(Ellipsoid {
            center: [c[0] + side * 0.19 * n[0] * jitter(0.05), c[1] - 0.02 * n[1], c[2] + 0.02 * n[2] * jitter(1.0)],
            radii: [0.14 * n[0] * jitter(0.08), 0.22 * n[1] * jitter(0.08), 0.33 * n[2] * jitter(0.06)],
        });
    }
    let heart = Ellipsoid {
        center: [c[0] + 0.03 * n[0], c[1] + 0.08 * n[1], c[2] - 0.12 * n[2]],
        radii: [0.09 * n[0] * jitter(0.1), 0.11 * n[1] * jitter(0.1), 0.14 * n[2]],
    };
    let spine = Ellipsoid {
        center: [c[0], c[1] + 0.27 * n[1], c[2]],
        radii: [0.05 * n[0], 0.05 * n[1], 0.45 * n[2]],
    };
    let mut vessels = Vec::new();
    for lung in &lungs {
        for _ in 0..6 {
            // rejection-sample a center well inside the lung
            for _ in 0..100 {
                let p: [f64; 3] = std::array::from_fn(|a| lung.center[a] + lung.radii[a] * (r.random::<f64>() * 1.4 - 0.7));
                let inner = Ellipsoid { center: lung.center, radii: lung.radii.map(|x| 0.7 * x) };
                if inner.contains(p) {
                    let rad = n[0] / 64.0 * (1.5 + 1.5 * r.random::<f64>());
                    vessels.push(Ellipsoid { center: p, radii: [rad; 3] });
                    break;
                }
            }
        }
    }
    Layout { body, lungs, heart, spine, vessels }
}

fn tissue_at(l: &Layout, p: [f64; 3]) -> (f64, bool) {
    if !l.body.contains(p) {
        return (BACKGROUND, false);
    }
    if l.spine.contains(p) {
        return (BONE, false);
    }
    if l.lungs.iter().any(|e| e.contains(p)) {
        if l.vessels.iter().any(|e| e.contains(p)) {
            return (VESSEL, true);
        }
        return (LUNG, true);
    }
    if l.heart.contains(p) {
        return (HEART, false);
    }
    (SOFT_TISSUE, false)
}

fn add_noise(v: &Volume<f64>, sigma: f64, r: &mut ChaCha8Rng) -> Volume<f64> {
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let e: f64 = r.sample(StandardNormal);
            (x + sigma * e).clamp(0.0, 1.0)
        })
        .collect();
    Volume::new(*v.grid(), data).expect("same grid")
}

/// Renders the undeformed anatomy under both modalities.
pub fn render_anatomy<T: Real>(seed: u64, params: &PhantomParams) -> Result<Anatomy<T>> {
    params.validate()?;
    let grid = params.grid()?;
    let l = layout(params.dims, params.lung_count, &mut rng(seed, STREAM_ANATOMY));
    let point = |c: [usize; 3]| c.map(|x| x as f64);
    let raw = Volume::from_fn(grid, |c| tissue_at(&l, point(c)).0);
    let label = LabelMask::<f64>::from_fn(grid, |c| tissue_at(&l, point(c)).1);
    let clean = gaussian_filter(&raw, 1.0)?;
    let a = add_noise(&clean, params.noise_sigma, &mut rng(seed, STREAM_NOISE_A));
    let b = add_noise(&clean.map(|v| params.intensity_map.apply(v)), params.noise_sigma, &mut rng(seed, STREAM_NOISE_B));
    Ok(Anatomy { modality_a: a.cast(), modality_b: b.cast(), label: LabelMask::from_volume_clamped(label.as_volume().cast()) })
}

/// Smooth random field with `max |u| = amplitude` and Jacobian determinant
/// above [`MIN_JACOBIAN`] everywhere.
pub fn random_smooth_field<T: Real>(seed: u64, grid: GridMeta, amplitude: f64, smoothness: f64) -> Result<DisplacementField<T>> {
    if !(amplitude >= 0.0) || !(smoothness >= 0.0) {
        return Err(Error::Config("amplitude and smoothness must be >= 0".into()));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    for attempt in 0..MAX_FIELD_ATTEMPTS {
        let mut r = rng(seed, STREAM_FIELD + attempt);
        // filter on a grid padded by the kernel radius so the border sees
        // the same noise statistics as the interior
        let pad = (3.0 * smoothness).ceil() as usize;
        let big = GridMeta::with_dims(grid.dims.map(|n| n + 2 * pad))?;
        let comps = [0, 1, 2].map(|_| {
            let noise = Volume::from_fn(big, |_| r.sample::<f64, _>(StandardNormal));
            let smooth = gaussian_filter(&noise, smoothness).expect("valid sigma");
            Volume::from_fn(grid, |c| smooth.get(c[0] + pad, c[1] + pad, c[2] + pad)).into_data()
        });
        let field = DisplacementField::from_components(grid, comps)?;
        let peak = field.max_norm();
        if peak <= 0.0 {
            continue;
        }
        let field = field.scaled(amplitude / peak);
        let min_j = jacobian_determinant(&field).data().iter().copied().fold(f64::INFINITY, f64::min);
        if min_j > MIN_JACOBIAN {
            return Ok(field.cast());
        }
    }
    Err(Error::Generation(format!(
        "no field with min Jacobian > {MIN_JACOBIAN} in {MAX_FIELD_ATTEMPTS} attempts (amplitude {amplitude}, smoothness {smoothness})"
    )))
}

/// Builds one phantom case: modality A is the fixed image, modality B warped
/// by a random smooth field is the moving image.
pub fn generate_phantom_pair<T: Real>(seed: u64, params: &PhantomParams) -> Result<PhantomCase<T>> {
    let anatomy = render_anatomy::<T>(seed, params)?;
    let grid = params.grid()?;
    let true_field: DisplacementField<T> =
        random_smooth_field(seed, grid, params.deformation_amplitude, params.deformation_smoothness)?;
    let moving = warp(&anatomy.modality_b, &true_field)?;
    let moving_label = warp_label(&anatomy.label, &true_field)?.binarized(T::lit(0.5));
    Ok(PhantomCase {
        fixed: anatomy.modality_a,
        moving,
        fixed_label: anatomy.label,
        moving_label,
        true_field,
        seed,
        params: params.clone(),
    })
}

/// A smooth "functional" map inside the lungs (zero elsewhere), rendered in
/// fixed space and carried into moving space by the case's true field.
/// Returns `(fixed_space, moving_space)`.
pub fn functional_companion<T: Real>(case: &PhantomCase<T>) -> Result<(Volume<T>, Volume<T>)> {
    let dims = case.fixed.dims();
    let label = case.fixed_label.as_volume();
    let fixed_space = Volume::from_fn(*case.fixed.grid(), |c| {
        let inside = label.get(c[0], c[1], c[2]) >= T::lit(0.5);
        if !inside {
            return T::zero();
        }
        // gravity-dependent gradient along y plus a gentle z ramp
        let y = c[1] as f64 / (dims[1] - 1) as f64;
        let z = c[2] as f64 / (dims[2] - 1) as f64;
        T::lit(0.4 + 0.4 * y + 0.2 * z)
    });
    let moving_space = warp(&fixed_space, &case.true_field)?;
    Ok((fixed_space, moving_space))
}

/// Pearson correlation of two equally sized volumes.
pub fn pearson<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    a.grid().check_compatible(b.grid())?;
    let n = a.data().len() as f64;
    let ma = a.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mb = b.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateRange(0.0));
    }
    Ok(sab / (saa * sbb).sqrt())
}
