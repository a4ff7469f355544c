//! Overlap and transform-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::registration::RegistrationResult;
use crate::scalar::Real;
use crate::transform::{fraction_negative_jacobian, DisplacementField};
use crate::volume::LabelMask;

/// Threshold used to binarize soft labels before Dice.
pub const DICE_THRESHOLD: f64 = 0.5;

/// `2|A∩B| / (|A| + |B|)` after binarizing both masks at `threshold`
/// (`v >= threshold`). Two empty masks score 1.
pub fn dice<T: Real>(a: &LabelMask<T>, b: &LabelMask<T>, threshold: T) -> Result<f64> {
    a.grid().check_compatible(b.grid())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x >= threshold, y >= threshold);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Evaluation summary of one registration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    /// Percentage (0–100) of voxels with a negative Jacobian determinant.
    pub pct_neg_jacobian: f64,
    /// RMS displacement of the final field, voxels.
    pub field_rms: f64,
    /// Wall time; left out of the JSON so reports are reproducible.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl MetricsReport {
    pub fn from_parts<T: Real>(
        warped_label: &LabelMask<T>,
        fixed_label: &LabelMask<T>,
        field: &DisplacementField<T>,
        runtime_seconds: f64,
    ) -> Result<Self> {
        Ok(MetricsReport {
            dice: dice(warped_label, fixed_label, T::lit(DICE_THRESHOLD))?,
            pct_neg_jacobian: 100.0 * fraction_negative_jacobian(field),
            field_rms: field.rms(),
            runtime_seconds,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Header for [`markdown_row`](Self::markdown_row).
    pub fn markdown_header() -> &'static str {
        "| Method | DSC | %Jφ |\n|---|---|---|"
    }

    pub fn markdown_row(&self, method: &str) -> String {
        format!("| {method} | {:.3} | {:.2} |", self.dice, self.pct_neg_jacobian)
    }
}

/// Dice of the warped label against `fixed_label`, %Jφ and RMS of the final
/// field, and the recorded runtime.
pub fn evaluate<T: Real>(result: &RegistrationResult<T>, fixed_label: &LabelMask<T>) -> Result<MetricsReport> {
    MetricsReport::from_parts(&result.warped_label, fixed_label, &result.final_field, result.runtime_seconds)
}
