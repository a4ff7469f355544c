//! Helpers shared by the integration tests.

#![allow(dead_code)]

use mplreg::losses::bending::{bending_energy, bending_energy_gradient};
use mplreg::losses::gaussian::GaussianKernel;
use mplreg::losses::gpl::GaussianPyramidLoss;
use mplreg::losses::gradcheck::Objective;
use mplreg::losses::histogram::MutualInformation;
use mplreg::registration::RegistrationPair;
use mplreg::transform::{affine_to_field, compose, AffineParams, DisplacementField};
use mplreg::volume::{GridMeta, LabelMask, Volume};
use mplreg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full 3-D convolution with clamp-to-edge indexing, no separability.
pub fn dense_convolution(v: &Volume<f64>, kernel: &GaussianKernel<f64>) -> Vec<f64> {
    let [nx, ny, nz] = v.dims();
    let r = kernel.radius() as isize;
    let w = kernel.weights();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; nx * ny * nz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut s = 0.0;
                for c in -r..=r {
                    for b in -r..=r {
                        for a in -r..=r {
                            let wt = w[(a + r) as usize] * w[(b + r) as usize] * w[(c + r) as usize];
                            s += wt
                                * v.get(
                                    clamp(i as isize + a, nx),
                                    clamp(j as isize + b, ny),
                                    clamp(k as isize + c, nz),
                                );
                        }
                    }
                }
                out[i + nx * (j + ny * k)] = s;
            }
        }
    }
    out
}

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

pub fn grid(n: usize) -> GridMeta {
    GridMeta::with_dims([n; 3]).unwrap()
}

pub fn random_volume(g: GridMeta, r: &mut ChaCha8Rng) -> Volume<f64> {
    Volume::from_fn(g, |_| r.random_range(0.02..0.98))
}

/// Soft ball label with a linear rim, so interior, rim and exterior all occur.
pub fn ball(g: GridMeta, center: [f64; 3], radius: f64) -> LabelMask<f64> {
    let v = Volume::from_fn(g, |c| {
        let d = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum::<f64>().sqrt();
        (radius + 0.5 - d).clamp(0.0, 1.0)
    });
    LabelMask::new(v).unwrap()
}

/// Displacements whose sample points avoid the trilinear cell boundaries.
pub fn off_grid_field(g: GridMeta, amp: f64, r: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let comps = [0, 1, 2].map(|_| {
        (0..g.len())
            .map(|_| {
                let whole = r.random_range(-amp..=amp).round();
                let frac = r.random_range(0.15..0.85) * if r.random::<bool>() { 1.0 } else { -1.0 };
                whole + frac
            })
            .collect()
    });
    DisplacementField::from_components(g, comps).unwrap()
}

pub fn pair(n: usize, seed: u64) -> RegistrationPair<f64> {
    let g = grid(n);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = (n as f64 - 1.0) / 2.0;
    RegistrationPair::new(
        random_volume(g, &mut r),
        random_volume(g, &mut r),
        ball(g, [c - 0.3, c + 0.2, c], 1.6),
        ball(g, [c + 0.4, c, c - 0.2], 1.8),
    )
    .unwrap()
}

pub struct MiOfIntensities<'a> {
    pub mi: &'a MutualInformation<f64>,
    pub grid: GridMeta,
}

impl Objective<f64> for MiOfIntensities<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.mi.loss(&Volume::new(self.grid, p.to_vec())?)
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mi.loss_and_gradient(&Volume::new(self.grid, p.to_vec())?)?.1)
    }
}

pub struct GplOfLabel<'a> {
    pub gpl: &'a GaussianPyramidLoss<f64>,
    pub grid: GridMeta,
}

impl Objective<f64> for GplOfLabel<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.gpl.loss(&LabelMask::new(Volume::new(self.grid, p.to_vec())?)?)
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gpl.loss_and_gradient(&LabelMask::new(Volume::new(self.grid, p.to_vec())?)?)?.1)
    }
}

pub struct Bending(pub GridMeta);

impl Objective<f64> for Bending {
    fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(bending_energy(&DisplacementField::from_flat(self.0, p)?))
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(bending_energy_gradient(&DisplacementField::from_flat(self.0, p)?).to_flat())
    }
}

/// Distance from the sample points `x + u(x)` to the nearest cell face of the
/// trilinear interpolant. Central differences are only a valid oracle when a
/// perturbation cannot carry a sample point across a face.
pub fn face_clearance(u: &DisplacementField<f64>) -> f64 {
    let g = *u.grid();
    let mut worst = f64::INFINITY;
    for idx in 0..g.len() {
        let x = g.coords(idx);
        let d = u.at(idx);
        for a in 0..3 {
            let p = x[a] as f64 + d[a];
            worst = worst.min((p - p.round()).abs());
        }
    }
    worst
}

pub const CLEARANCE: f64 = 2e-3;

/// Random near-identity affine parameters whose sample points clear every
/// cell face.
pub fn near_identity_affine(g: GridMeta, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut p = AffineParams::<f64>::identity().to_vec();
        for (i, v) in p.iter_mut().enumerate() {
            *v += if i % 4 == 3 { r.random_range(-0.6..0.6) } else { r.random_range(-0.04..0.04) };
        }
        if face_clearance(&affine_to_field(&AffineParams::from_slice(&p).unwrap(), &g)) > CLEARANCE {
            return p;
        }
    }
}

/// Random increment whose composition with `acc` clears every cell face.
pub fn clear_increment(acc: &DisplacementField<f64>, amp: f64, seed: u64) -> DisplacementField<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inc = off_grid_field(*acc.grid(), amp, &mut r);
        if face_clearance(&compose(acc, &inc).unwrap()) > CLEARANCE {
            return inc;
        }
    }
}
