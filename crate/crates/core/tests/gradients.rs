//! Analytic gradients against central finite differences on small random
//! instances.

mod common;

use common::*;
use mplreg::losses::gpl::{GaussianPyramidLoss, GplMetric};
use mplreg::losses::gradcheck::{finite_difference_check, Quadratic};
use mplreg::losses::histogram::{HistogramConfig, MutualInformation};
use mplreg::losses::mpl::LossWeights;
use mplreg::phantom::{generate_phantom_pair, PhantomParams};
use mplreg::registration::{AffineObjective, CascadeObjective, Checked, LossContext, RegistrationPair, StageObjective};
use mplreg::transform::{affine_to_field, AffineParams, DisplacementField};
use mplreg::volume::LabelMask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn quadratic_self_test() {
    let q = Quadratic { a: vec![1.0, 3.0, 0.5], b: vec![-2.0, 0.25, 4.0] };
    let err = finite_difference_check(&q, &[0.3, -1.2, 2.0], STEP).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn mi_wrt_intensities() {
    let g = grid(6);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let f = random_volume(g, &mut r);
    let m = random_volume(g, &mut r);
    for mask in [None, Some(ball(g, [2.5; 3], 2.0))] {
        let mi = MutualInformation::new(&f, HistogramConfig::default(), mask.as_ref()).unwrap();
        let err = finite_difference_check(&MiOfIntensities { mi: &mi, grid: g }, m.data(), STEP).unwrap();
        assert!(err < TOL, "MI gradient error {err}");
    }
}

#[test]
fn gpl_wrt_label_values() {
    let g = grid(6);
    let fixed = ball(g, [2.4, 2.6, 2.5], 1.7);
    let soft = ball(g, [3.1, 2.2, 2.8], 2.1).as_volume().map(|v| 0.05 + 0.9 * v);
    let moving = LabelMask::new(soft).unwrap();
    for metric in [GplMetric::SoftDice, GplMetric::Mse] {
        let gpl = GaussianPyramidLoss::new(&fixed, &LossWeights::default().scales, metric).unwrap();
        let err = finite_difference_check(&GplOfLabel { gpl: &gpl, grid: g }, moving.data(), STEP).unwrap();
        assert!(err < TOL, "{metric:?} gradient error {err}");
    }
}

#[test]
fn bending_wrt_field() {
    let g = grid(6);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let phi = off_grid_field(g, 1.0, &mut r);
    let err = finite_difference_check(&Bending(g), &phi.to_flat(), STEP).unwrap();
    assert!(err < TOL, "bending gradient error {err}");
}

#[test]
fn mi_only_wrt_affine() {
    let p = pair(6, 3);
    let w = LossWeights { beta: 0.0, lambda: 0.0, ..Default::default() };
    let ctx = LossContext::new(&p, &w, &HistogramConfig::default(), false).unwrap();
    let obj = AffineObjective { ctx: &ctx };
    let theta = near_identity_affine(*p.grid(), 4);
    let err = finite_difference_check(&Checked(&obj), &theta, STEP).unwrap();
    assert!(err < TOL, "MI affine gradient error {err}");
}

#[test]
fn full_mpl_wrt_affine() {
    let p = pair(6, 5);
    let ctx = LossContext::new(&p, &LossWeights::default(), &HistogramConfig::default(), false).unwrap();
    let obj = AffineObjective { ctx: &ctx };
    let theta = near_identity_affine(*p.grid(), 6);
    let err = finite_difference_check(&Checked(&obj), &theta, STEP).unwrap();
    assert!(err < TOL, "MPL affine gradient error {err}");
}

#[test]
fn each_term_wrt_dense_field() {
    let p = pair(6, 7);
    let g = *p.grid();
    let acc = DisplacementField::from_fn(g, |c| [0.3 * (c[1] as f64 * 0.7).sin(), -0.25, 0.2 * (c[0] as f64 * 0.5).cos()]);
    let inc = clear_increment(&acc, 1.0, 8);
    let terms = [
        ("mi", LossWeights { beta: 0.0, lambda: 0.0, ..Default::default() }),
        ("gpl", LossWeights { alpha: 0.0, lambda: 0.0, ..Default::default() }),
        ("reg", LossWeights { alpha: 0.0, beta: 0.0, ..Default::default() }),
        ("mpl", LossWeights::default()),
    ];
    for (name, w) in terms {
        let ctx = LossContext::new(&p, &w, &HistogramConfig::default(), false).unwrap();
        let obj = CascadeObjective { ctx: &ctx, accumulated: &acc };
        let err = finite_difference_check(&Checked(&obj), &inc.to_flat(), STEP).unwrap();
        assert!(err < TOL, "{name} dense gradient error {err}");
    }
}

#[test]
fn full_mpl_on_small_phantom() {
    let params = PhantomParams { dims: [4; 3], deformation_amplitude: 0.5, deformation_smoothness: 2.0, ..Default::default() };
    let case = generate_phantom_pair::<f64>(9, &params).unwrap();
    let p = RegistrationPair::new(case.moving, case.fixed, case.moving_label, case.fixed_label).unwrap();
    let ctx = LossContext::new(&p, &LossWeights::default(), &HistogramConfig::default(), false).unwrap();
    let zero = DisplacementField::zeros(*p.grid());
    let obj = CascadeObjective { ctx: &ctx, accumulated: &zero };
    let inc = clear_increment(&zero, 0.0, 10);
    assert_eq!(obj.dim(), 3 * 64);
    let err = finite_difference_check(&Checked(&obj), &inc.to_flat(), STEP).unwrap();
    assert!(err < TOL, "phantom MPL gradient error {err}");
}

#[test]
fn dense_and_affine_over_many_instances() {
    let mut worst = 0.0f64;
    for seed in 0..8u64 {
        let p = pair(6, 100 + seed);
        let ctx = LossContext::new(&p, &LossWeights::default(), &HistogramConfig::default(), false).unwrap();
        let theta = near_identity_affine(*p.grid(), seed);
        worst = worst.max(finite_difference_check(&Checked(&AffineObjective { ctx: &ctx }), &theta, STEP).unwrap());
        let acc = affine_to_field(&AffineParams::from_slice(&theta).unwrap(), p.grid());
        let inc = clear_increment(&acc, 1.0, seed + 50);
        let obj = CascadeObjective { ctx: &ctx, accumulated: &acc };
        worst = worst.max(finite_difference_check(&Checked(&obj), &inc.to_flat(), STEP).unwrap());
    }
    assert!(worst < TOL, "worst gradient error {worst}");
}
