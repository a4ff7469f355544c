//! `mplreg`: registration, evaluation, phantom generation, gradient checks and
//! overlays from the command line.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 runtime
//! divergence.

mod checks;
mod error;
mod manifest;
mod overlay;
mod pipeline;
mod suite;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mplreg::nifti::read_nifti;
use mplreg::transform::{read_field, DisplacementField};
use mplreg::volume::{LabelMask, Volume};
use mplreg::{MetricsReport, PhantomParams, RegistrationConfig};

use error::{CliError, CliResult};
use manifest::{RegisterInputs, RunManifest, RunSpec, SuiteSpec};
use pipeline::S;

#[derive(Parser)]
#[command(name = "mplreg", version, about = "Multimodal deformable image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image and label onto a fixed pair.
    Register(RegisterArgs),
    /// Dice, %Jφ and field RMS for a warped label.
    Metrics(MetricsArgs),
    /// Write a synthetic two-modality case with a known deformation.
    Phantom(PhantomArgs),
    /// Check analytic gradients against central differences.
    CheckGrad(CheckGradArgs),
    /// PNG of a fixed slice with the moving image's edges burned in.
    Overlay(OverlayArgs),
    /// Register a batch of phantom cases and print a summary table.
    Suite(SuiteArgs),
    /// Run a manifest again into a new directory.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// Phantom case directory; supplies the four inputs and config.json.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    fixed: Option<PathBuf>,
    #[arg(long)]
    moving: Option<PathBuf>,
    #[arg(long)]
    fixed_label: Option<PathBuf>,
    #[arg(long)]
    moving_label: Option<PathBuf>,
    /// JSON registration config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cascades: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a directory that already holds a run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    warped_label: PathBuf,
    #[arg(long)]
    fixed_label: PathBuf,
    /// Final displacement field; without it %Jφ and RMS are 0.
    #[arg(long)]
    field: Option<PathBuf>,
    /// Method name for the Markdown row.
    #[arg(long, default_value = "MPL")]
    method: String,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PhantomOverrides {
    /// Grid size: one value for a cube or three comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..=3)]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    lungs: Option<usize>,
    /// Peak ground-truth displacement, voxels.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Smoothing σ of the ground-truth field, voxels.
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

impl PhantomOverrides {
    fn params(&self) -> CliResult<PhantomParams> {
        let mut p = PhantomParams::default();
        if let Some(d) = &self.dims {
            p.dims = match d[..] {
                [n] => [n; 3],
                [x, y, z] => [x, y, z],
                _ => return Err(CliError::Usage("--dims takes one or three values".into())),
            };
        }
        p.spacing = self.spacing.unwrap_or(p.spacing);
        p.lung_count = self.lungs.unwrap_or(p.lung_count);
        p.deformation_amplitude = self.amplitude.unwrap_or(p.deformation_amplitude);
        p.deformation_smoothness = self.smoothness.unwrap_or(p.deformation_smoothness);
        p.noise_sigma = self.noise.unwrap_or(p.noise_sigma);
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    params: PhantomOverrides,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Cube edge of the random instance, at most 8.
    #[arg(long, default_value_t = 6)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    fixed: PathBuf,
    /// Warped moving image whose edges are drawn.
    #[arg(long)]
    moving: PathBuf,
    #[arg(long, value_enum, default_value = "z")]
    axis: overlay::Axis,
    /// Slice index; the middle slice by default.
    #[arg(long)]
    index: Option<usize>,
    /// Display window width; the slice's full range by default.
    #[arg(long, requires = "level")]
    window: Option<f64>,
    #[arg(long, requires = "window")]
    level: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Cases registered concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    params: PhantomOverrides,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cascades: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Worker cap from `MPLREG_THREADS`, if set.
fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("MPLREG_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("MPLREG_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

pub(crate) fn thread_pool(n: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| CliError::Usage(e.to_string()))
}

fn read_config(path: &Path) -> CliResult<RegistrationConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RegistrationConfig::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn absolute(p: PathBuf) -> CliResult<PathBuf> {
    std::path::absolute(&p).map_err(|e| CliError::io(p, e))
}

fn cmd_register(a: RegisterArgs) -> CliResult<()> {
    let from_case = |name: &str| a.case.as_ref().map(|d| d.join(name));
    let need = |given: Option<PathBuf>, name: &str, flag: &str| {
        given
            .or_else(|| from_case(name))
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required without --case")))
            .and_then(absolute)
    };
    let inputs = RegisterInputs {
        fixed: need(a.fixed, "fixed.nii", "fixed")?,
        moving: need(a.moving, "moving.nii", "moving")?,
        fixed_label: need(a.fixed_label, "fixed_label.nii", "fixed-label")?,
        moving_label: need(a.moving_label, "moving_label.nii", "moving-label")?,
    };
    let config_path = a.config.or_else(|| from_case("config.json").filter(|p| p.exists()));
    let mut cfg = match &config_path {
        Some(p) => read_config(p)?,
        None => RegistrationConfig::default(),
    };
    cfg.cascades = a.cascades.unwrap_or(cfg.cascades);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let metrics = pipeline::run_register(&inputs, &cfg, &a.out, a.force)?;
    println!("{}", metrics.to_json());
    Ok(())
}

/// Labels are kept soft when they already lie in `[0, 1]`; otherwise every
/// nonzero voxel counts as inside.
fn read_soft_label(path: &Path) -> CliResult<LabelMask<S>> {
    let v: Volume<S> = read_nifti(path)?;
    Ok(LabelMask::new(v.clone()).unwrap_or_else(|_| LabelMask::from_volume_nonzero(&v)))
}

fn cmd_metrics(a: MetricsArgs) -> CliResult<()> {
    let warped = read_soft_label(&a.warped_label)?;
    let fixed = read_soft_label(&a.fixed_label)?;
    let field = match &a.field {
        Some(p) => read_field::<S>(p)?,
        None => DisplacementField::zeros(*fixed.grid()),
    };
    warped.grid().check_compatible(fixed.grid())?;
    fixed.grid().check_compatible(field.grid())?;
    let report = MetricsReport::from_parts(&warped, &fixed, &field, 0.0)?;
    let json = report.to_json();
    println!("{json}");
    println!("{}\n{}", MetricsReport::markdown_header(), report.markdown_row(&a.method));
    if let Some(p) = &a.out {
        std::fs::write(p, json + "\n").map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn cmd_check_grad(a: CheckGradArgs) -> CliResult<()> {
    if !(2..=checks::MAX_DIM).contains(&a.dims) {
        return Err(CliError::Usage(format!("--dims must lie in 2..={}, got {}", checks::MAX_DIM, a.dims)));
    }
    let results = checks::run_checks(a.dims, a.seed)?;
    let mut failed = Vec::new();
    for (name, err) in &results {
        let ok = *err < checks::TOLERANCE;
        println!("{:<28} {err:.3e} {}", name, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_overlay(a: OverlayArgs) -> CliResult<()> {
    let fixed: Volume<S> = read_nifti(&a.fixed)?;
    let moving: Volume<S> = read_nifti(&a.moving)?;
    fixed.grid().check_compatible(moving.grid())?;
    let [nx, ny, nz] = fixed.dims();
    let extent = match a.axis {
        overlay::Axis::X => nx,
        overlay::Axis::Y => ny,
        overlay::Axis::Z => nz,
    };
    let index = a.index.unwrap_or(extent / 2);
    let fs = overlay::extract_slice(&fixed, a.axis, index)?;
    let ms = overlay::extract_slice(&moving, a.axis, index)?;
    let window = match (a.window, a.level) {
        (Some(window), Some(level)) => overlay::Window { window, level },
        _ => overlay::Window::full_range(&fs),
    };
    let img = overlay::render(&fs, &ms, window)?;
    img.save(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))
}

fn cmd_suite(a: SuiteArgs, threads: Option<usize>) -> CliResult<()> {
    let mut config = match &a.config {
        Some(p) => read_config(p)?,
        None => RegistrationConfig::default(),
    };
    config.cascades = a.cascades.unwrap_or(config.cascades);
    let spec = SuiteSpec { cases: a.cases, first_seed: a.first_seed, jobs: a.jobs, phantom: a.params.params()?, config };
    suite::cmd_suite(&spec, threads, a.out.as_deref(), a.force)
}

fn cmd_replay(a: ReplayArgs, threads: Option<usize>) -> CliResult<()> {
    let m = RunManifest::read(&a.manifest)?;
    match m.spec {
        RunSpec::Register { inputs, config } => {
            let metrics = pipeline::run_register(&inputs, &config, &a.out, a.force)?;
            println!("{}", metrics.to_json());
            Ok(())
        }
        RunSpec::Phantom { params } => pipeline::run_phantom(m.seed, &params, &a.out, a.force),
        RunSpec::Suite(spec) => suite::cmd_suite(&spec, threads, Some(&a.out), a.force),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_cap()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Phantom(a) => pipeline::run_phantom(a.seed, &a.params.params()?, &a.out, a.force),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::Overlay(a) => cmd_overlay(a),
        Command::Suite(a) => cmd_suite(a, threads),
        Command::Replay(a) => cmd_replay(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
