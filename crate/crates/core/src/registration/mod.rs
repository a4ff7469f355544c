//! Progressive alignment driven by per-pair optimization: an affine stage
//! followed by `n` dense cascade stages, each composed onto the accumulated
//! field as `acc(x + φ_n(x)) + φ_n(x)`.

mod adam;
pub mod objective;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Adam};
pub use objective::{AffineObjective, CascadeObjective, Checked, LossContext, StageObjective};

use crate::error::{Error, Result};
use crate::losses::histogram::HistogramConfig;
use crate::losses::mpl::{LossBreakdown, LossWeights};
use crate::metrics::{dice, MetricsReport, DICE_THRESHOLD};
use crate::scalar::Real;
use crate::transform::{affine_to_field, compose, fraction_negative_jacobian, warp, warp_label, AffineParams, DisplacementField};
use crate::volume::{GridMeta, LabelMask, PreprocessConfig, Volume};

/// Moving/fixed images and labels on one common grid.
#[derive(Clone, Debug)]
pub struct RegistrationPair<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub moving_label: LabelMask<T>,
    pub fixed_label: LabelMask<T>,
}

impl<T: Real> RegistrationPair<T> {
    pub fn new(moving: Volume<T>, fixed: Volume<T>, moving_label: LabelMask<T>, fixed_label: LabelMask<T>) -> Result<Self> {
        let g = fixed.grid();
        g.check_compatible(moving.grid())?;
        g.check_compatible(moving_label.grid())?;
        g.check_compatible(fixed_label.grid())?;
        Ok(RegistrationPair { moving, fixed, moving_label, fixed_label })
    }

    pub fn grid(&self) -> &GridMeta {
        self.fixed.grid()
    }
}

/// Optimizer and loss settings. Every field has a default, so a JSON config
/// only needs the keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub cascades: usize,
    pub iters_affine: usize,
    pub iters_cascade: usize,
    /// Adam step for dense increments, voxels per iteration.
    pub step_size: f64,
    /// Adam step for the affine stage, in voxels of displacement at the grid
    /// edge per iteration.
    pub affine_step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub histogram: HistogramConfig,
    /// Restrict the MI histogram to the fixed label.
    pub mi_mask: bool,
    /// Early stop when the relative loss change over `stop_window` iterations
    /// falls below this.
    pub stop_tol: f64,
    pub stop_window: usize,
    /// Diagnostic ceiling on %Jφ of the composed field after each cascade.
    pub max_neg_jacobian_pct: f64,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            cascades: 5,
            iters_affine: 200,
            iters_cascade: 200,
            step_size: 1e-2,
            affine_step_size: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            histogram: HistogramConfig::default(),
            mi_mask: false,
            stop_tol: 1e-6,
            stop_window: 10,
            max_neg_jacobian_pct: 5.0,
            seed: 0,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_affine == 0 || self.iters_cascade == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        for (name, v) in [("step_size", self.step_size), ("affine_step_size", self.affine_step_size)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if self.stop_window == 0 {
            return Err(Error::Config("stop_window must be >= 1".into()));
        }
        self.weights.validate()?;
        self.histogram.validate()
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Affine,
    Dense,
}

/// Optimized parameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageParameters<T> {
    Affine(AffineParams<T>),
    Dense(DisplacementField<T>),
}

impl<T> StageParameters<T> {
    pub fn kind(&self) -> StageKind {
        match self {
            StageParameters::Affine(_) => StageKind::Affine,
            StageParameters::Dense(_) => StageKind::Dense,
        }
    }
}

/// Per-stage bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub kind: StageKind,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best: LossBreakdown,
    /// Dice of the label warped by the accumulated field after this stage.
    pub dice: f64,
    pub pct_neg_jacobian: f64,
    pub jacobian_ceiling_exceeded: bool,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    pub affine: AffineParams<T>,
    pub final_field: DisplacementField<T>,
    pub warped_moving: Volume<T>,
    pub warped_label: LabelMask<T>,
    /// Loss at every iteration, one trace per stage (affine first).
    pub per_stage_losses: Vec<Vec<LossBreakdown>>,
    pub stages: Vec<StageSummary>,
    pub metrics: MetricsReport,
    pub runtime_seconds: f64,
}

/// A failed registration with whatever was completed before the failure.
#[derive(Debug)]
pub struct RegistrationError<T> {
    pub error: Error,
    pub completed_stages: Vec<StageSummary>,
    pub partial_field: Option<DisplacementField<T>>,
}

impl<T> std::fmt::Display for RegistrationError<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed stages)", self.error, self.completed_stages.len())
    }
}

impl<T: std::fmt::Debug> std::error::Error for RegistrationError<T> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl<T> From<Error> for RegistrationError<T> {
    fn from(error: Error) -> Self {
        RegistrationError { error, completed_stages: Vec::new(), partial_field: None }
    }
}

/// Outcome of one optimization loop.
#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub best_params: Vec<T>,
    pub best: LossBreakdown,
    pub best_iteration: usize,
    pub trace: Vec<LossBreakdown>,
}

/// Minimizes `obj` with Adam from `init`, returning the best evaluated iterate.
///
/// `map` turns the optimizer's coordinates into the objective's parameters and
/// `pullback` maps a gradient back; both are identities for dense stages.
fn optimize<T: Real, O: StageObjective<T>>(
    obj: &O,
    init: Vec<T>,
    step_size: f64,
    iters: usize,
    cfg: &RegistrationConfig,
    stage: usize,
    map: &dyn Fn(&[T]) -> Vec<T>,
    pullback: &dyn Fn(&[T]) -> Vec<T>,
) -> Result<StageOutcome<T>> {
    let mut q = init;
    let mut adam = Adam::new(q.len(), step_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut trace = Vec::with_capacity(iters);
    let mut best: Option<(LossBreakdown, Vec<T>, usize)> = None;
    for it in 0..iters {
        let params = map(&q);
        let last = it + 1 == iters;
        let (b, g) = obj.evaluate(&params, !last)?;
        if !b.total.is_finite() {
            return Err(Error::Diverged { stage, iteration: it });
        }
        trace.push(b);
        if best.as_ref().is_none_or(|(bb, _, _)| b.total < bb.total) {
            best = Some((b, params, it));
        }
        if last {
            break;
        }
        let w = cfg.stop_window;
        if it >= w {
            let prev = trace[it - w].total;
            if (prev - b.total).abs() <= cfg.stop_tol * b.total.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let g = pullback(&g.expect("gradient requested"));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { stage, iteration: it });
        }
        adam.step(&mut q, &g);
    }
    let (best, best_params, best_iteration) = best.expect("at least one iteration");
    Ok(StageOutcome { best_params, best, best_iteration, trace })
}

/// Maps centered, edge-scaled affine coordinates to raw `[A | t]`.
///
/// With `u(x) = L (x − c) + s`, coordinate `q[4r + a]` is `L_ra · h_a` (the
/// displacement it causes at the grid edge) and `q[4r + 3]` is `s_r`.
struct AffineChart {
    center: [f64; 3],
    half: [f64; 3],
}

impl AffineChart {
    fn new(grid: &GridMeta) -> Self {
        let center = grid.dims.map(|n| (n as f64 - 1.0) / 2.0);
        let half = center.map(|c| c.max(1.0));
        AffineChart { center, half }
    }

    fn to_params<T: Real>(&self, q: &[T]) -> Vec<T> {
        let mut p = vec![T::zero(); 12];
        for r in 0..3 {
            let mut shift = q[4 * r + 3];
            for a in 0..3 {
                let l = q[4 * r + a] / T::lit(self.half[a]);
                p[4 * r + a] = l + if r == a { T::one() } else { T::zero() };
                shift -= l * T::lit(self.center[a]);
            }
            p[4 * r + 3] = shift;
        }
        p
    }

    fn from_params<T: Real>(&self, p: &[T]) -> Vec<T> {
        let mut q = vec![T::zero(); 12];
        for r in 0..3 {
            let mut s = p[4 * r + 3];
            for a in 0..3 {
                let l = p[4 * r + a] - if r == a { T::one() } else { T::zero() };
                q[4 * r + a] = l * T::lit(self.half[a]);
                s += l * T::lit(self.center[a]);
            }
            q[4 * r + 3] = s;
        }
        q
    }

    /// Chain rule from raw-parameter gradients to chart coordinates.
    fn pullback<T: Real>(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); 12];
        for r in 0..3 {
            let gt = g[4 * r + 3];
            for a in 0..3 {
                out[4 * r + a] = (g[4 * r + a] - gt * T::lit(self.center[a])) / T::lit(self.half[a]);
            }
            out[4 * r + 3] = gt;
        }
        out
    }
}

fn run_affine<T: Real>(ctx: &LossContext<'_, T>, cfg: &RegistrationConfig) -> Result<(AffineParams<T>, StageOutcome<T>)> {
    let obj = AffineObjective { ctx };
    let chart = AffineChart::new(ctx.grid());
    let init = chart.from_params(&AffineParams::<T>::identity().to_vec());
    let out = optimize(
        &obj,
        init,
        cfg.affine_step_size,
        cfg.iters_affine,
        cfg,
        0,
        &|q| chart.to_params(q),
        &|g| chart.pullback(g),
    )?;
    Ok((AffineParams::from_slice(&out.best_params)?, out))
}

fn run_cascade<T: Real>(
    ctx: &LossContext<'_, T>,
    accumulated: &DisplacementField<T>,
    cfg: &RegistrationConfig,
    stage: usize,
) -> Result<(DisplacementField<T>, StageOutcome<T>)> {
    let obj = CascadeObjective { ctx, accumulated };
    let init = vec![T::zero(); obj.dim()];
    let id = |v: &[T]| v.to_vec();
    let out = optimize(&obj, init, cfg.step_size, cfg.iters_cascade, cfg, stage, &id, &id)?;
    let inc = DisplacementField::from_flat(*ctx.grid(), &out.best_params)?;
    Ok((compose(accumulated, &inc)?, out))
}

/// Affine stage alone: starts from the identity and returns the best iterate.
pub fn register_affine<T: Real>(pair: &RegistrationPair<T>, cfg: &RegistrationConfig) -> Result<AffineParams<T>> {
    cfg.validate()?;
    let ctx = LossContext::new(pair, &cfg.weights, &cfg.histogram, cfg.mi_mask)?;
    Ok(run_affine(&ctx, cfg)?.0)
}

/// One dense stage on top of `accumulated`; returns the composed field.
pub fn register_cascade<T: Real>(
    pair: &RegistrationPair<T>,
    accumulated: &DisplacementField<T>,
    cfg: &RegistrationConfig,
) -> Result<DisplacementField<T>> {
    cfg.validate()?;
    pair.grid().check_compatible(accumulated.grid())?;
    let ctx = LossContext::new(pair, &cfg.weights, &cfg.histogram, cfg.mi_mask)?;
    Ok(run_cascade(&ctx, accumulated, cfg, 1)?.0)
}

fn summarize<T: Real>(
    kind: StageKind,
    out: &StageOutcome<T>,
    field: &DisplacementField<T>,
    pair: &RegistrationPair<T>,
    cfg: &RegistrationConfig,
) -> Result<StageSummary> {
    let warped = warp_label(&pair.moving_label, field)?;
    let pct = 100.0 * fraction_negative_jacobian(field);
    Ok(StageSummary {
        kind,
        iterations: out.trace.len(),
        best_iteration: out.best_iteration,
        best: out.best,
        dice: dice(&warped, &pair.fixed_label, T::lit(DICE_THRESHOLD))?,
        pct_neg_jacobian: pct,
        jacobian_ceiling_exceeded: !pct.is_finite() || pct >= cfg.max_neg_jacobian_pct,
    })
}

/// Full pipeline: affine stage, rasterization, `cfg.cascades` dense stages,
/// then the warped outputs and metrics.
pub fn register<T: Real>(
    pair: &RegistrationPair<T>,
    cfg: &RegistrationConfig,
) -> std::result::Result<RegistrationResult<T>, RegistrationError<T>> {
    let start = Instant::now();
    cfg.validate()?;
    let ctx = LossContext::new(pair, &cfg.weights, &cfg.histogram, cfg.mi_mask)?;
    let mut stages = Vec::with_capacity(cfg.cascades + 1);
    let mut traces = Vec::with_capacity(cfg.cascades + 1);

    let (affine, out) = run_affine(&ctx, cfg)?;
    // the affine stage is cascade 0: compose(zero, affine field) is the affine field
    let mut field = affine_to_field(&affine, pair.grid());
    stages.push(summarize(StageKind::Affine, &out, &field, pair, cfg)?);
    traces.push(out.trace);

    for stage in 1..=cfg.cascades {
        match run_cascade(&ctx, &field, cfg, stage) {
            Ok((next, out)) => {
                field = next;
                stages.push(summarize(StageKind::Dense, &out, &field, pair, cfg)?);
                traces.push(out.trace);
            }
            Err(error) => {
                return Err(RegistrationError { error, completed_stages: stages, partial_field: Some(field) });
            }
        }
    }

    let warped_moving = warp(&pair.moving, &field)?;
    let warped_label = warp_label(&pair.moving_label, &field)?;
    let runtime_seconds = start.elapsed().as_secs_f64();
    let metrics = MetricsReport::from_parts(&warped_label, &pair.fixed_label, &field, runtime_seconds)?;
    Ok(RegistrationResult {
        affine,
        final_field: field,
        warped_moving,
        warped_label,
        per_stage_losses: traces,
        stages,
        metrics,
        runtime_seconds,
    })
}

/// Carries a volume that is co-aligned with the moving image into fixed space.
pub fn apply_to_companion<T: Real>(result: &RegistrationResult<T>, companion: &Volume<T>) -> Result<Volume<T>> {
    warp(companion, &result.final_field)
}
