//! Finite-difference gradient checks on small random instances.

use mplreg::losses::bending::{bending_energy, bending_energy_gradient};
use mplreg::losses::gpl::GaussianPyramidLoss;
use mplreg::losses::gradcheck::{finite_difference_check, Objective, Quadratic};
use mplreg::losses::histogram::MutualInformation;
use mplreg::registration::{AffineObjective, CascadeObjective, Checked, LossContext, RegistrationPair};
use mplreg::transform::{affine_to_field, compose, AffineParams, DisplacementField};
use mplreg::volume::{GridMeta, LabelMask, Volume};
use mplreg::{HistogramConfig, LossWeights, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_DIM: usize = 8;
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-4;
/// Minimum distance of every sample point from a trilinear cell face.
const CLEARANCE: f64 = 2e-3;

struct MiOfIntensities<'a>(&'a MutualInformation<f64>, GridMeta);

impl Objective<f64> for MiOfIntensities<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.0.loss(&Volume::new(self.1, p.to_vec())?)
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.loss_and_gradient(&Volume::new(self.1, p.to_vec())?)?.1)
    }
}

struct GplOfLabel<'a>(&'a GaussianPyramidLoss<f64>, GridMeta);

impl Objective<f64> for GplOfLabel<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.0.loss(&LabelMask::new(Volume::new(self.1, p.to_vec())?)?)
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.loss_and_gradient(&LabelMask::new(Volume::new(self.1, p.to_vec())?)?)?.1)
    }
}

struct Bending(GridMeta);

impl Objective<f64> for Bending {
    fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(bending_energy(&DisplacementField::from_flat(self.0, p)?))
    }
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(bending_energy_gradient(&DisplacementField::from_flat(self.0, p)?).to_flat())
    }
}

fn random_volume(g: GridMeta, r: &mut ChaCha8Rng) -> Volume<f64> {
    Volume::from_fn(g, |_| r.random_range(0.02..0.98))
}

fn ball(g: GridMeta, center: [f64; 3], radius: f64) -> LabelMask<f64> {
    let v = Volume::from_fn(g, |c| {
        let d = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum::<f64>().sqrt();
        (radius + 0.5 - d).clamp(0.0, 1.0)
    });
    LabelMask::from_volume_clamped(v)
}

fn face_clearance(u: &DisplacementField<f64>) -> f64 {
    let g = *u.grid();
    (0..g.len())
        .flat_map(|idx| {
            let x = g.coords(idx);
            let d = u.at(idx);
            (0..3).map(move |a| {
                let p = x[a] as f64 + d[a];
                (p - p.round()).abs()
            })
        })
        .fold(f64::INFINITY, f64::min)
}

fn off_grid_field(g: GridMeta, r: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let comps = [0, 1, 2].map(|_| {
        (0..g.len())
            .map(|_| r.random_range(-1.0f64..=1.0).round() + r.random_range(0.15..0.85) * if r.random() { 1.0 } else { -1.0 })
            .collect()
    });
    DisplacementField::from_components(g, comps).expect("component lengths match grid")
}

/// Named maximum relative errors, one per check.
pub fn run_checks(n: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let g = GridMeta::with_dims([n; 3])?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = Vec::new();

    let quad = Quadratic { a: (0..20).map(|_| r.random_range(0.5..2.0)).collect(), b: (0..20).map(|_| r.random_range(-1.0..1.0)).collect() };
    let p: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    out.push(("quadratic self-test", finite_difference_check(&quad, &p, STEP)?));

    let pair = RegistrationPair::new(
        random_volume(g, &mut r),
        random_volume(g, &mut r),
        ball(g, [c - 0.3, c + 0.2, c], 0.3 * n as f64),
        ball(g, [c + 0.4, c, c - 0.2], 0.32 * n as f64),
    )?;
    let hist = HistogramConfig::default();
    let mi = MutualInformation::new(&pair.fixed, hist, None)?;
    out.push(("MI wrt intensities", finite_difference_check(&MiOfIntensities(&mi, g), pair.moving.data(), STEP)?));
    let defaults = LossWeights::default();
    let gpl = GaussianPyramidLoss::new(&pair.fixed_label, &defaults.scales, defaults.gpl_metric)?;
    let soft = pair.moving_label.as_volume().map(|v| 0.05 + 0.9 * v);
    out.push(("GPL wrt label", finite_difference_check(&GplOfLabel(&gpl, g), soft.data(), STEP)?));
    out.push(("bending wrt field", finite_difference_check(&Bending(g), &off_grid_field(g, &mut r).to_flat(), STEP)?));

    let affine = loop {
        let mut p = AffineParams::<f64>::identity().to_vec();
        for (i, v) in p.iter_mut().enumerate() {
            *v += if i % 4 == 3 { r.random_range(-0.6..0.6) } else { r.random_range(-0.04..0.04) };
        }
        if face_clearance(&affine_to_field(&AffineParams::from_slice(&p)?, &g)) > CLEARANCE {
            break p;
        }
    };
    let acc = affine_to_field(&AffineParams::from_slice(&affine)?, &g);
    let inc = loop {
        let inc = off_grid_field(g, &mut r);
        if face_clearance(&compose(&acc, &inc)?) > CLEARANCE {
            break inc;
        }
    };
    let terms = [
        (Some("MI wrt affine"), "MI wrt field", LossWeights { beta: 0.0, lambda: 0.0, ..defaults.clone() }),
        (Some("GPL wrt affine"), "GPL wrt field", LossWeights { alpha: 0.0, lambda: 0.0, ..defaults.clone() }),
        (None, "bending wrt composed field", LossWeights { alpha: 0.0, beta: 0.0, ..defaults.clone() }),
        (Some("MPL wrt affine"), "MPL wrt field", defaults.clone()),
    ];
    for (affine_name, field_name, w) in &terms {
        let ctx = LossContext::new(&pair, w, &hist, false)?;
        if let Some(name) = affine_name {
            out.push((*name, finite_difference_check(&Checked(&AffineObjective { ctx: &ctx }), &affine, STEP)?));
        }
        let obj = CascadeObjective { ctx: &ctx, accumulated: &acc };
        out.push((*field_name, finite_difference_check(&Checked(&obj), &inc.to_flat(), STEP)?));
    }
    Ok(out)
}
