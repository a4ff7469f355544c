//! Batch registration over generated phantom cases.

use std::path::Path;

use mplreg::registration::{register, RegistrationPair};
use mplreg::{dice, generate_phantom_pair, MetricsReport, DICE_THRESHOLD};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{now_unix, prepare_out_dir, write_json, RunManifest, RunSpec, SuiteSpec};
use crate::pipeline::S;

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub seed: u64,
    pub unregistered_dice: f64,
    pub metrics: MetricsReport,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub mean: MetricsReport,
    pub mean_unregistered_dice: f64,
}

impl SuiteReport {
    /// Markdown table with one row per case, then the unregistered and
    /// registered means.
    pub fn markdown(&self) -> String {
        let mut lines = vec![MetricsReport::markdown_header().to_string()];
        for c in &self.cases {
            lines.push(c.metrics.markdown_row(&format!("seed {}", c.seed)));
        }
        let before = MetricsReport { dice: self.mean_unregistered_dice, ..Default::default() };
        lines.push(before.markdown_row("Initial (mean)"));
        lines.push(self.mean.markdown_row("MPL (mean)"));
        lines.join("\n")
    }
}

fn run_case(spec: &SuiteSpec, seed: u64, threads: Option<usize>) -> CliResult<CaseReport> {
    let case = generate_phantom_pair::<S>(seed, &spec.phantom)?;
    let unregistered_dice = dice(&case.moving_label, &case.fixed_label, DICE_THRESHOLD as S)?;
    let pair = RegistrationPair::new(case.moving, case.fixed, case.moving_label, case.fixed_label)?;
    let cfg = mplreg::RegistrationConfig { seed, ..spec.config.clone() };
    let go = || register(&pair, &cfg).map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")));
    let result = match threads {
        Some(n) => crate::thread_pool(n)?.install(go)?,
        None => go()?,
    };
    Ok(CaseReport { seed, unregistered_dice, metrics: result.metrics, runtime_seconds: result.runtime_seconds })
}

/// Runs `spec.cases` seeds, `spec.jobs` at a time. `threads` caps the
/// data-parallel workers of each case.
pub fn run_suite(spec: &SuiteSpec, threads: Option<usize>) -> CliResult<SuiteReport> {
    spec.phantom.validate()?;
    spec.config.validate()?;
    if spec.cases == 0 || spec.jobs == 0 {
        return Err(CliError::Usage("--cases and --jobs must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..spec.cases as u64).map(|i| spec.first_seed + i).collect();
    let cases = crate::thread_pool(spec.jobs)?
        .install(|| seeds.par_iter().map(|&s| run_case(spec, s, threads)).collect::<CliResult<Vec<_>>>())?;
    let n = cases.len() as f64;
    let mean = MetricsReport {
        dice: cases.iter().map(|c| c.metrics.dice).sum::<f64>() / n,
        pct_neg_jacobian: cases.iter().map(|c| c.metrics.pct_neg_jacobian).sum::<f64>() / n,
        field_rms: cases.iter().map(|c| c.metrics.field_rms).sum::<f64>() / n,
        runtime_seconds: cases.iter().map(|c| c.runtime_seconds).sum::<f64>() / n,
    };
    let mean_unregistered_dice = cases.iter().map(|c| c.unregistered_dice).sum::<f64>() / n;
    Ok(SuiteReport { cases, mean, mean_unregistered_dice })
}

/// Runs the suite, prints the table and, with `out`, writes `report.md`,
/// `suite.json` and the manifest.
pub fn cmd_suite(spec: &SuiteSpec, threads: Option<usize>, out: Option<&Path>, force: bool) -> CliResult<()> {
    let started = now_unix();
    if let Some(dir) = out {
        prepare_out_dir(dir, force)?;
    }
    let report = run_suite(spec, threads)?;
    let table = report.markdown();
    println!("{table}");
    if let Some(dir) = out {
        std::fs::write(dir.join("report.md"), table + "\n").map_err(|e| CliError::io(dir.join("report.md"), e))?;
        write_json(&dir.join("suite.json"), &report)?;
        RunManifest::new(RunSpec::Suite(spec.clone()), spec.first_seed, started)
            .finish("ok", vec!["report.md".into(), "suite.json".into()])
            .write(dir)?;
    }
    Ok(())
}
