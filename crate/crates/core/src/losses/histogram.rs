//! Parzen-window joint histograms and the mutual-information loss.
//!
//! An intensity `v ∈ [0, 1]` sits at continuous bin coordinate `v · (B − 1)`,
//! so 0 and 1 land on the centers of the first and last bins. Each voxel adds
//! a separable Gaussian bump truncated at three standard deviations, minus
//! the second-order expansion of the Gaussian in `d²` about the cutoff, so the
//! bump and its first two derivatives vanish there. The whole histogram is
//! then normalized to sum one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::volume::{LabelMask, Volume};

/// Tolerance on the `[0, 1]` input range.
pub const RANGE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Parzen window width in bins; 0 means plain nearest-bin counting.
    pub parzen_sigma: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { bins: 32, parzen_sigma: 1.0 }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("histogram needs at least 2 bins, got {}", self.bins)));
        }
        if !(self.parzen_sigma.is_finite() && self.parzen_sigma >= 0.0) {
            return Err(Error::Config(format!("parzen sigma must be >= 0, got {}", self.parzen_sigma)));
        }
        if self.bins > u16::MAX as usize || max_window(self.parzen_sigma) > u8::MAX as usize {
            return Err(Error::Config("histogram bins or parzen sigma too large".into()));
        }
        Ok(())
    }
}

/// Normalized joint distribution `p(m, f)` (row `m`, column `f`) and its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram<T> {
    pub bins: usize,
    pub joint: Vec<T>,
    pub marginal_m: Vec<T>,
    pub marginal_f: Vec<T>,
    pub parzen_sigma: f64,
}

impl<T: Real> JointHistogram<T> {
    #[inline]
    pub fn p(&self, m: usize, f: usize) -> T {
        self.joint[m * self.bins + f]
    }

    /// `Σ p log(p / (p_m p_f))` over nonzero cells.
    pub fn mutual_information(&self) -> T {
        let b = self.bins;
        let mut mi = T::zero();
        for k in 0..b {
            let pm = self.marginal_m[k];
            for l in 0..b {
                let p = self.joint[k * b + l];
                if p > T::zero() {
                    mi += p * (p / (pm * self.marginal_f[l])).ln();
                }
            }
        }
        mi
    }
}

/// Window weights for one intensity: a Gaussian of width σ bins truncated at
/// 3σ, minus its first-order Taylor expansion in `d²` about the cutoff, so the
/// bump and its slope both reach zero there.
#[derive(Clone, Copy, Debug)]
struct Parzen<T> {
    bins: usize,
    sigma: f64,
    scale: T,
    reach: T,
    reach_sq: T,
    edge: T,
    inv_s2: T,
    half_inv_s2: T,
}

/// Largest number of bins a window can touch.
fn max_window(sigma: f64) -> usize {
    (6.0 * sigma).floor() as usize + 2
}

impl<T: Real> Parzen<T> {
    fn new(cfg: &HistogramConfig) -> Self {
        let s = cfg.parzen_sigma;
        let (inv_s2, half) = if s > 0.0 { (1.0 / (s * s), 0.5 / (s * s)) } else { (0.0, 0.0) };
        Parzen {
            bins: cfg.bins,
            sigma: s,
            scale: T::from_usize_lossy(cfg.bins - 1),
            reach: T::lit(3.0 * s),
            reach_sq: T::lit(9.0 * s * s),
            edge: T::lit((-4.5f64).exp()),
            inv_s2: T::lit(inv_s2),
            half_inv_s2: T::lit(half),
        }
    }

    /// Fills `w` (and `dw = ∂w/∂v` when requested) and returns the first bin
    /// and the number of bins touched.
    #[inline]
    fn window(&self, v: T, w: &mut [T], dw: Option<&mut [T]>) -> (usize, usize) {
        let v = v.max(T::zero()).min(T::one());
        let b = v * self.scale;
        let top = self.bins - 1;
        if self.sigma == 0.0 {
            let k = b.round().to_usize().unwrap_or(0).min(top);
            w[0] = T::one();
            if let Some(dw) = dw {
                dw[0] = T::zero();
            }
            return (k, 1);
        }
        let lo = (b - self.reach).ceil().max(T::zero()).to_usize().unwrap_or(0);
        let hi = (b + self.reach).floor().to_usize().unwrap_or(0).min(top);
        let len = hi + 1 - lo;
        // g_i = exp(-(d0 - i)^2 / 2s^2) built from two exponentials
        let d0 = b - T::from_usize_lossy(lo);
        let mut gi = (-(d0 * d0) * self.half_inv_s2).exp();
        let growth = (d0 * self.inv_s2).exp();
        let decay = (-self.half_inv_s2).exp();
        let step_decay = decay * decay;
        let mut ratio = growth * decay;
        let mut dw = dw;
        for i in 0..len {
            let d = d0 - T::from_usize_lossy(i);
            let t = (d * d - self.reach_sq) * self.half_inv_s2;
            let slope = self.edge * (T::one() - t);
            w[i] = (gi - slope - self.edge * t * t * T::lit(0.5)).max(T::zero());
            if let Some(dw) = dw.as_deref_mut() {
                dw[i] = -(gi - slope) * d * self.inv_s2 * self.scale;
            }
            gi *= ratio;
            ratio *= step_decay;
        }
        (lo, len)
    }
}

fn check_range<T: Real>(v: &Volume<T>) -> Result<()> {
    let lo = T::lit(-RANGE_EPS);
    let hi = T::lit(1.0 + RANGE_EPS);
    match v.data().iter().find(|&&x| !(x >= lo && x <= hi)) {
        Some(&bad) => Err(Error::Domain { value: bad.as_f64() }),
        None => Ok(()),
    }
}

/// Mutual-information loss bound to one fixed image.
///
/// The fixed image's Parzen windows are computed once and reused for every
/// moving image evaluated against it.
#[derive(Clone, Debug)]
pub struct MutualInformation<T> {
    cfg: HistogramConfig,
    parzen: Parzen<T>,
    width: usize,
    fixed_start: Vec<u16>,
    fixed_len: Vec<u8>,
    fixed_w: Vec<T>,
    mask: Option<Vec<T>>,
    grid: crate::volume::GridMeta,
}

impl<T: Real> MutualInformation<T> {
    pub fn new(fixed: &Volume<T>, cfg: HistogramConfig, mask: Option<&LabelMask<T>>) -> Result<Self> {
        cfg.validate()?;
        check_range(fixed)?;
        if let Some(m) = mask {
            fixed.grid().check_compatible(m.grid())?;
        }
        let parzen = Parzen::<T>::new(&cfg);
        let width = max_window(cfg.parzen_sigma);
        let n = fixed.data().len();
        let mut fixed_start = vec![0u16; n];
        let mut fixed_len = vec![0u8; n];
        let mut fixed_w = vec![T::zero(); n * width];
        for (i, &v) in fixed.data().iter().enumerate() {
            let (s, l) = parzen.window(v, &mut fixed_w[i * width..(i + 1) * width], None);
            fixed_start[i] = s as u16;
            fixed_len[i] = l as u8;
        }
        Ok(MutualInformation {
            cfg,
            parzen,
            width,
            fixed_start,
            fixed_len,
            fixed_w,
            mask: mask.map(|m| m.data().to_vec()),
            grid: *fixed.grid(),
        })
    }

    pub fn config(&self) -> &HistogramConfig {
        &self.cfg
    }

    fn raw_histogram(&self, moving: &Volume<T>) -> Vec<T> {
        let b = self.cfg.bins;
        let width = self.width;
        let md = moving.data();
        par::reduce_chunks(
            md.len(),
            par::CHUNK,
            |range| {
                let mut h = vec![T::zero(); b * b];
                let mut wm = vec![T::zero(); width];
                for x in range {
                    let weight = self.mask.as_ref().map_or(T::one(), |m| m[x]);
                    if weight == T::zero() {
                        continue;
                    }
                    let (ms, ml) = self.parzen.window(md[x], &mut wm, None);
                    let fs = self.fixed_start[x] as usize;
                    let fl = self.fixed_len[x] as usize;
                    let wf = &self.fixed_w[x * width..x * width + fl];
                    for (i, &a) in wm[..ml].iter().enumerate() {
                        let a = a * weight;
                        let row = &mut h[(ms + i) * b + fs..(ms + i) * b + fs + fl];
                        for (cell, &c) in row.iter_mut().zip(wf) {
                            *cell += a * c;
                        }
                    }
                }
                h
            },
            |mut acc, part| {
                if acc.is_empty() {
                    return part;
                }
                acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
                acc
            },
            Vec::new(),
        )
    }

    /// Normalized joint histogram of `moving` against the bound fixed image.
    pub fn histogram(&self, moving: &Volume<T>) -> Result<JointHistogram<T>> {
        moving.grid().check_compatible(&self.grid)?;
        check_range(moving)?;
        let raw = self.raw_histogram(moving);
        let (joint, _) = normalize(raw)?;
        Ok(self.with_marginals(joint))
    }

    fn with_marginals(&self, joint: Vec<T>) -> JointHistogram<T> {
        let b = self.cfg.bins;
        let mut marginal_m = vec![T::zero(); b];
        let mut marginal_f = vec![T::zero(); b];
        for k in 0..b {
            for l in 0..b {
                marginal_m[k] += joint[k * b + l];
                marginal_f[l] += joint[k * b + l];
            }
        }
        JointHistogram { bins: b, joint, marginal_m, marginal_f, parzen_sigma: self.cfg.parzen_sigma }
    }

    /// The loss `−MI(moving, fixed)`.
    pub fn loss(&self, moving: &Volume<T>) -> Result<T> {
        Ok(-self.histogram(moving)?.mutual_information())
    }

    /// Loss and its derivative with respect to every moving intensity.
    pub fn loss_and_gradient(&self, moving: &Volume<T>) -> Result<(T, Vec<T>)> {
        if self.cfg.parzen_sigma == 0.0 {
            return Err(Error::NonDifferentiable("parzen_sigma = 0 gives a piecewise-constant histogram"));
        }
        moving.grid().check_compatible(&self.grid)?;
        check_range(moving)?;
        let b = self.cfg.bins;
        let (joint, z) = normalize(self.raw_histogram(moving))?;
        let h = self.with_marginals(joint);
        let loss = -h.mutual_information();

        // dL/dp for p > 0, projected onto the simplex and scaled by 1/Z
        let mut g = vec![T::zero(); b * b];
        let mut mean = T::zero();
        for k in 0..b {
            for l in 0..b {
                let p = h.joint[k * b + l];
                if p > T::zero() {
                    let v = -(p.ln() - h.marginal_m[k].ln() - h.marginal_f[l].ln());
                    g[k * b + l] = v;
                    mean += p * v;
                }
            }
        }
        g.iter_mut().for_each(|v| *v = (*v - mean) / z);

        let width = self.width;
        let md = moving.data();
        let mut grad = vec![T::zero(); md.len()];
        grad.par_chunks_mut(par::CHUNK).enumerate().for_each(|(c, out)| {
            let mut wm = vec![T::zero(); width];
            let mut dwm = vec![T::zero(); width];
            for (o, x) in out.iter_mut().zip(c * par::CHUNK..) {
                let weight = self.mask.as_ref().map_or(T::one(), |m| m[x]);
                if weight == T::zero() {
                    continue;
                }
                let (ms, ml) = self.parzen.window(md[x], &mut wm, Some(&mut dwm));
                let fs = self.fixed_start[x] as usize;
                let fl = self.fixed_len[x] as usize;
                let wf = &self.fixed_w[x * width..x * width + fl];
                let mut acc = T::zero();
                for (i, &d) in dwm[..ml].iter().enumerate() {
                    let row = &g[(ms + i) * b + fs..(ms + i) * b + fs + fl];
                    let mut s = T::zero();
                    for (&gv, &cw) in row.iter().zip(wf) {
                        s += gv * cw;
                    }
                    acc += d * s;
                }
                *o = acc * weight;
            }
        });
        Ok((loss, grad))
    }
}

fn normalize<T: Real>(mut raw: Vec<T>) -> Result<(Vec<T>, T)> {
    let z: T = raw.iter().copied().sum();
    if !(z > T::zero()) {
        return Err(Error::InvalidData("joint histogram is empty (mask selects nothing)".into()));
    }
    raw.iter_mut().for_each(|v| *v /= z);
    Ok((raw, z))
}

/// Parzen joint histogram of `m` against `f`, optionally weighted by `mask`.
pub fn joint_histogram<T: Real>(
    m: &Volume<T>,
    f: &Volume<T>,
    cfg: &HistogramConfig,
    mask: Option<&LabelMask<T>>,
) -> Result<JointHistogram<T>> {
    m.grid().check_compatible(f.grid())?;
    MutualInformation::new(f, *cfg, mask)?.histogram(m)
}

/// `−Σ p(m,f) log(p(m,f) / (p(m) p(f)))`; never positive.
pub fn mi_loss<T: Real>(m: &Volume<T>, f: &Volume<T>, cfg: &HistogramConfig, mask: Option<&LabelMask<T>>) -> Result<T> {
    m.grid().check_compatible(f.grid())?;
    MutualInformation::new(f, *cfg, mask)?.loss(m)
}

/// `∂ mi_loss / ∂ m(x)` at every voxel.
pub fn mi_loss_gradient<T: Real>(
    m: &Volume<T>,
    f: &Volume<T>,
    cfg: &HistogramConfig,
    mask: Option<&LabelMask<T>>,
) -> Result<Volume<T>> {
    m.grid().check_compatible(f.grid())?;
    let (_, g) = MutualInformation::new(f, *cfg, mask)?.loss_and_gradient(m)?;
    Ok(Volume::from_parts_unchecked(*m.grid(), g))
}
