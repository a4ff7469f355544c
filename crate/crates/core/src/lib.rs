//! Multimodal deformable image registration.
//!
//! An affine stage followed by cascaded dense displacement-field stages, each
//! optimized per image pair against a combined loss: Parzen mutual information
//! on intensities, a Gaussian-pyramid soft-Dice loss on labels, and bending
//! energy on the composed field.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`; the `*32` variants use `f32`.

pub mod error;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod nifti;
mod par;
pub mod phantom;
pub mod registration;
pub mod scalar;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use losses::{GplMetric, HistogramConfig, LossBreakdown, LossWeights};
pub use metrics::{dice, evaluate, MetricsReport, DICE_THRESHOLD};
pub use phantom::{generate_phantom_pair, random_smooth_field, PhantomParams};
pub use registration::{register, register_affine, register_cascade, RegistrationConfig, StageKind};
pub use scalar::Real;
pub use transform::{compose, jacobian_determinant, warp, warp_label, AffineParams};
pub use volume::{GridMeta, PreprocessConfig};

pub type Volume = volume::Volume<f64>;
pub type LabelMask = volume::LabelMask<f64>;
pub type DisplacementField = transform::DisplacementField<f64>;
pub type RegistrationPair = registration::RegistrationPair<f64>;
pub type RegistrationResult = registration::RegistrationResult<f64>;
pub type PhantomCase = phantom::PhantomCase<f64>;

pub type Volume32 = volume::Volume<f32>;
pub type LabelMask32 = volume::LabelMask<f32>;
pub type DisplacementField32 = transform::DisplacementField<f32>;
pub type RegistrationPair32 = registration::RegistrationPair<f32>;
pub type RegistrationResult32 = registration::RegistrationResult<f32>;
pub type PhantomCase32 = phantom::PhantomCase<f32>;
