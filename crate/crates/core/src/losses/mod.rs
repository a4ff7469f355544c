//! Loss terms: mutual information, Gaussian-pyramid label loss, bending
//! energy, their weighted combination, and gradient checking.

pub mod bending;
pub mod gaussian;
pub mod gpl;
pub mod gradcheck;
pub mod histogram;
pub mod mpl;

pub use bending::{bending_energy, bending_energy_gradient};
pub use gaussian::{gaussian_filter, gaussian_filter_label, GaussianKernel, SeparableGaussian};
pub use gpl::{gpl_loss, gpl_loss_gradient, GaussianPyramidLoss, GplMetric, SOFT_DICE_EPS};
pub use gradcheck::{finite_difference_check, Objective, Quadratic};
pub use histogram::{joint_histogram, mi_loss, mi_loss_gradient, HistogramConfig, JointHistogram, MutualInformation};
pub use mpl::{mpl_loss, LossBreakdown, LossWeights};
