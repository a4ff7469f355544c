//! The combined loss `α·L_MI + β·L_GPL + λ·L_reg`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::bending::bending_energy;
use crate::losses::gpl::{validate_scales, GaussianPyramidLoss, GplMetric};
use crate::losses::histogram::{HistogramConfig, MutualInformation};
use crate::scalar::Real;
use crate::transform::DisplacementField;
use crate::volume::{LabelMask, Volume};

/// Term weights and the GPL scale list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub scales: Vec<f64>,
    pub gpl_metric: GplMetric,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 2.0,
            scales: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
            gpl_metric: GplMetric::SoftDice,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(crate::Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        validate_scales(&self.scales)
    }

    /// MI term only (λ unchanged).
    pub fn mi_only(&self) -> Self {
        LossWeights { beta: 0.0, ..self.clone() }
    }

    /// GPL term only (λ unchanged).
    pub fn gpl_only(&self) -> Self {
        LossWeights { alpha: 0.0, ..self.clone() }
    }
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mi: f64,
    pub gpl: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mi: f64, gpl: f64, reg: f64, w: &LossWeights) -> Self {
        LossBreakdown { mi, gpl, reg, total: w.alpha * mi + w.beta * gpl + w.lambda * reg }
    }
}

/// Evaluates every term for an already warped moving image and label.
pub fn mpl_loss<T: Real>(
    m_warped: &Volume<T>,
    f: &Volume<T>,
    m_label_warped: &LabelMask<T>,
    f_label: &LabelMask<T>,
    phi: &DisplacementField<T>,
    w: &LossWeights,
    hist: &HistogramConfig,
) -> Result<LossBreakdown> {
    w.validate()?;
    m_warped.grid().check_compatible(f.grid())?;
    m_label_warped.grid().check_compatible(f.grid())?;
    f_label.grid().check_compatible(f.grid())?;
    phi.grid().check_compatible(f.grid())?;
    let mi = MutualInformation::new(f, *hist, None)?.loss(m_warped)?;
    let gpl = GaussianPyramidLoss::new(f_label, &w.scales, w.gpl_metric)?.loss(m_label_warped)?;
    let reg = bending_energy(phi);
    Ok(LossBreakdown::new(mi.as_f64(), gpl.as_f64(), reg.as_f64(), w))
}
