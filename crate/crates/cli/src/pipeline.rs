//! Register and phantom runs: load, preprocess, run, write artifacts.

use std::path::Path;

use mplreg::nifti::{read_label, read_nifti, write_nifti};
use mplreg::registration::{register, RegistrationPair, StageSummary};
use mplreg::transform::{write_field, AffineParams};
use mplreg::volume::{preprocess, LabelMask, Volume};
use mplreg::{generate_phantom_pair, LossBreakdown, MetricsReport, PhantomParams, RegistrationConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{now_unix, prepare_out_dir, write_json, RegisterInputs, RunManifest, RunSpec};

/// Scalar used by every CLI computation.
pub type S = f32;

pub const METRICS: &str = "metrics.json";

/// Reads the four inputs and brings them onto the fixed grid.
///
/// With preprocessing enabled each image is resampled, cropped around its own
/// label and padded to `out_dims`; the moving pair is then restamped onto the
/// fixed grid. Otherwise only intensities are normalized and the grids must
/// already agree.
pub fn load_pair(inputs: &RegisterInputs, cfg: &RegistrationConfig) -> CliResult<RegistrationPair<S>> {
    let fixed: Volume<S> = read_nifti(&inputs.fixed)?;
    let moving: Volume<S> = read_nifti(&inputs.moving)?;
    let fixed_label: LabelMask<S> = read_label(&inputs.fixed_label)?;
    let moving_label: LabelMask<S> = read_label(&inputs.moving_label)?;
    let pre = &cfg.preprocess;
    let f = preprocess(&fixed, &fixed_label, pre.fixed_pad_value, pre.fixed_clip, pre)?;
    let m = preprocess(&moving, &moving_label, pre.moving_pad_value, pre.moving_clip, pre)?;
    for (name, p) in [("fixed", f.overflow), ("moving", m.overflow)] {
        if p {
            eprintln!("warning: {name} ROI exceeds {:?} and was center-cropped", pre.out_dims);
        }
    }
    let (moving, moving_label) = if pre.enabled {
        let g = *f.image.grid();
        (m.image.with_grid(g)?, m.label.with_grid(g)?)
    } else {
        (m.image, m.label)
    };
    Ok(RegistrationPair::new(moving, f.image, moving_label, f.label)?)
}

#[derive(Serialize)]
struct LossRow {
    iter: usize,
    mi: f64,
    gpl: f64,
    reg: f64,
    total: f64,
}

/// Writes the per-iteration trace of all stages; `iter` runs across stages.
pub fn write_losses(path: &Path, traces: &[Vec<LossBreakdown>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for (iter, b) in traces.iter().flatten().enumerate() {
        w.serialize(LossRow { iter, mi: b.mi, gpl: b.gpl, reg: b.reg, total: b.total })
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct StagesReport<'a> {
    affine: Option<[[f64; 4]; 3]>,
    stages: &'a [StageSummary],
}

fn affine_rows(a: &AffineParams<S>) -> [[f64; 4]; 3] {
    a.matrix.map(|row| row.map(|v| v as f64))
}

/// Runs a registration and writes its artifacts into `out`.
///
/// Inputs and config are validated before `out` is touched. On divergence the
/// completed stages and the partial field are written and a runtime error is
/// returned.
pub fn run_register(
    inputs: &RegisterInputs,
    cfg: &RegistrationConfig,
    out: &Path,
    force: bool,
) -> CliResult<MetricsReport> {
    let started = now_unix();
    cfg.validate()?;
    let pair = load_pair(inputs, cfg)?;
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(RunSpec::Register { inputs: inputs.clone(), config: cfg.clone() }, cfg.seed, started);

    let mut written = Vec::new();
    let mut put = |name: &str, r: mplreg::Result<()>| -> CliResult<()> {
        r?;
        written.push(name.to_string());
        Ok(())
    };
    put("fixed.nii", write_nifti(&pair.fixed, out.join("fixed.nii")))?;
    put("fixed_label.nii", write_nifti(pair.fixed_label.as_volume(), out.join("fixed_label.nii")))?;

    let result = match register(&pair, cfg) {
        Ok(r) => r,
        Err(fail) => {
            if let Some(field) = &fail.partial_field {
                put("partial_field.nii", write_field(field, out.join("partial_field.nii")))?;
                written.push("partial_field.json".into());
            }
            write_json(&out.join("stages.json"), &StagesReport { affine: None, stages: &fail.completed_stages })?;
            written.push("stages.json".into());
            manifest.finish("diverged", written).write(out)?;
            return Err(CliError::Runtime(fail.to_string()));
        }
    };

    put("warped_moving.nii", write_nifti(&result.warped_moving, out.join("warped_moving.nii")))?;
    put("warped_label.nii", write_nifti(result.warped_label.as_volume(), out.join("warped_label.nii")))?;
    put("final_field.nii", write_field(&result.final_field, out.join("final_field.nii")))?;
    written.push("final_field.json".into());
    write_losses(&out.join("losses.csv"), &result.per_stage_losses)?;
    written.push("losses.csv".into());
    let stages = StagesReport { affine: Some(affine_rows(&result.affine)), stages: &result.stages };
    write_json(&out.join("stages.json"), &stages)?;
    written.push("stages.json".into());
    std::fs::write(out.join(METRICS), result.metrics.to_json() + "\n").map_err(|e| CliError::io(out.join(METRICS), e))?;
    written.push(METRICS.into());
    manifest.finish("ok", written).write(out)?;
    Ok(result.metrics)
}

/// Config written next to a phantom case. The volumes already share one grid
/// at the target spacing, so only intensity normalization is kept.
pub fn phantom_case_config(seed: u64) -> RegistrationConfig {
    let mut cfg = RegistrationConfig { seed, ..Default::default() };
    cfg.preprocess.enabled = false;
    cfg
}

pub fn run_phantom(seed: u64, params: &PhantomParams, out: &Path, force: bool) -> CliResult<()> {
    let started = now_unix();
    params.validate()?;
    let case = generate_phantom_pair::<S>(seed, params)?;
    prepare_out_dir(out, force)?;
    write_nifti(&case.fixed, out.join("fixed.nii"))?;
    write_nifti(&case.moving, out.join("moving.nii"))?;
    write_nifti(case.fixed_label.as_volume(), out.join("fixed_label.nii"))?;
    write_nifti(case.moving_label.as_volume(), out.join("moving_label.nii"))?;
    write_field(&case.true_field, out.join("true_field.nii"))?;
    write_json(&out.join("config.json"), &phantom_case_config(seed))?;
    let outputs = [
        "fixed.nii",
        "moving.nii",
        "fixed_label.nii",
        "moving_label.nii",
        "true_field.nii",
        "true_field.json",
        "config.json",
    ];
    RunManifest::new(RunSpec::Phantom { params: params.clone() }, seed, started)
        .finish("ok", outputs.map(String::from).to_vec())
        .write(out)
}
