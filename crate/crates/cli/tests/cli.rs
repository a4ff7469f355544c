//! End-to-end runs of the `mplreg` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mplreg::nifti::{read_label, read_nifti, write_nifti};
use mplreg::registration::{register, RegistrationPair};
use mplreg::transform::{affine_to_field, read_field, AffineParams, DisplacementField};
use mplreg::volume::{preprocess, GridMeta, LabelMask, Volume};
use mplreg::RegistrationConfig;
use tempfile::TempDir;

fn mplreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mplreg")).args(args).env("MPLREG_THREADS", "2").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: &str = r#"{"cascades": 1, "iters_affine": 25, "iters_cascade": 25, "seed": 5, "preprocess": {"enabled": false}}"#;

/// A small phantom case directory plus a quick config next to it.
fn small_case(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let case = dir.join(format!("case{seed}"));
    let o = mplreg(&["phantom", "--seed", &seed.to_string(), "--dims", "20", "--amplitude", "1.5", "--smoothness", "2.5", "--out", s(&case)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("quick.json");
    std::fs::write(&cfg, QUICK).unwrap();
    (case, cfg)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn phantom_is_deterministic_and_self_describing() {
    let t = TempDir::new().unwrap();
    let (a, _) = small_case(t.path(), 3);
    let b = t.path().join("again");
    assert_eq!(code(&mplreg(&["phantom", "--seed", "3", "--dims", "20", "--amplitude", "1.5", "--smoothness", "2.5", "--out", s(&b)])), 0);
    for f in ["fixed.nii", "moving.nii", "fixed_label.nii", "moving_label.nii", "true_field.nii", "config.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "phantom");
    assert_eq!(manifest["seed"], 3);
    let listed = manifest["outputs"].as_array().unwrap();
    assert!(listed.iter().all(|f| a.join(f.as_str().unwrap()).exists()));

    let flat = t.path().join("flat");
    assert_eq!(code(&mplreg(&["phantom", "--dims", "12", "--amplitude", "0", "--out", s(&flat)])), 0);
    let field: DisplacementField<f32> = read_field(flat.join("true_field.nii")).unwrap();
    assert_eq!(field, DisplacementField::zeros(*field.grid()));
}

#[test]
fn register_matches_the_library_and_replays_exactly() {
    let t = TempDir::new().unwrap();
    let (case, cfg) = small_case(t.path(), 1);
    let out = t.path().join("run");
    let o = mplreg(&["register", "--case", s(&case), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["fixed.nii", "fixed_label.nii", "warped_moving.nii", "warped_label.nii", "final_field.nii", "final_field.json", "losses.csv", "stages.json", "metrics.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // the same pipeline through the library
    let config = RegistrationConfig::from_json(QUICK).unwrap();
    let pre = &config.preprocess;
    let fixed = preprocess(&read_nifti::<f32>(case.join("fixed.nii")).unwrap(), &read_label(case.join("fixed_label.nii")).unwrap(), 0.0, None, pre).unwrap();
    let moving = preprocess(&read_nifti::<f32>(case.join("moving.nii")).unwrap(), &read_label(case.join("moving_label.nii")).unwrap(), 0.0, None, pre).unwrap();
    let pair = RegistrationPair::new(moving.image, fixed.image, moving.label, fixed.label).unwrap();
    let lib = register(&pair, &config).unwrap();
    assert_eq!(String::from_utf8(read(out.join("metrics.json"))).unwrap().trim_end(), lib.metrics.to_json());
    let field: DisplacementField<f32> = read_field(out.join("final_field.nii")).unwrap();
    assert_eq!(field, lib.final_field);

    let csv = String::from_utf8(read(out.join("losses.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,mi,gpl,reg,total"));
    let total: usize = lib.per_stage_losses.iter().map(Vec::len).sum();
    assert_eq!(lines.count(), total);

    let again = t.path().join("replay");
    let o = Command::new(env!("CARGO_BIN_EXE_mplreg"))
        .args(["replay", s(&out.join("manifest.json")), "--out", s(&again)])
        .env("MPLREG_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(out.join("metrics.json")), read(again.join("metrics.json")));

    // a second run into the same directory needs --force
    assert_eq!(code(&mplreg(&["register", "--case", s(&case), "--config", s(&cfg), "--out", s(&out)])), 2);
}

#[test]
fn metrics_subcommand_agrees_with_the_run() {
    let t = TempDir::new().unwrap();
    let (case, cfg) = small_case(t.path(), 2);
    let out = t.path().join("run");
    assert_eq!(code(&mplreg(&["register", "--case", s(&case), "--config", s(&cfg), "--out", s(&out)])), 0);
    let report = t.path().join("m.json");
    let o = mplreg(&[
        "metrics",
        "--warped-label",
        s(&out.join("warped_label.nii")),
        "--fixed-label",
        s(&out.join("fixed_label.nii")),
        "--field",
        s(&out.join("final_field.nii")),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&report), read(out.join("metrics.json")));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| MPL |"));

    let same = mplreg(&["metrics", "--warped-label", s(&case.join("fixed_label.nii")), "--fixed-label", s(&case.join("fixed_label.nii"))]);
    let text = String::from_utf8_lossy(&same.stdout);
    assert!(text.contains("\"dice\": 1.0"), "{text}");
    assert!(text.contains("\"pct_neg_jacobian\": 0.0"), "{text}");

    let g = GridMeta::with_dims([5, 5, 5]).unwrap();
    let other = t.path().join("other.nii");
    write_nifti(&Volume::<f32>::zeros(g), &other).unwrap();
    assert_eq!(code(&mplreg(&["metrics", "--warped-label", s(&other), "--fixed-label", s(&case.join("fixed_label.nii"))])), 2);
}

#[test]
fn zero_cascades_give_affine_only_outputs() {
    let t = TempDir::new().unwrap();
    let (case, cfg) = small_case(t.path(), 4);
    let out = t.path().join("run");
    assert_eq!(code(&mplreg(&["register", "--case", s(&case), "--config", s(&cfg), "--cascades", "0", "--out", s(&out)])), 0);
    let stages: serde_json::Value = serde_json::from_slice(&read(out.join("stages.json"))).unwrap();
    assert_eq!(stages["stages"].as_array().unwrap().len(), 1);
    assert_eq!(stages["stages"][0]["kind"], "affine");
    let rows: Vec<Vec<f32>> = serde_json::from_value(stages["affine"].clone()).unwrap();
    let mut a = AffineParams::<f32>::identity();
    for (r, row) in rows.iter().enumerate() {
        a.matrix[r].copy_from_slice(row);
    }
    let field: DisplacementField<f32> = read_field(out.join("final_field.nii")).unwrap();
    assert_eq!(field, affine_to_field(&a, field.grid()));
}

#[test]
fn input_errors_exit_2_without_outputs() {
    let t = TempDir::new().unwrap();
    let (case, cfg) = small_case(t.path(), 6);
    let out = t.path().join("run");
    let o = mplreg(&[
        "register",
        "--fixed",
        s(&case.join("fixed.nii")),
        "--moving",
        s(&case.join("moving.nii")),
        "--fixed-label",
        s(&case.join("missing_label.nii")),
        "--moving-label",
        s(&case.join("moving_label.nii")),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let bad = t.path().join("bad.json");
    std::fs::write(&bad, "{\"cascades\": \"many\"}").unwrap();
    assert_eq!(code(&mplreg(&["register", "--case", s(&case), "--config", s(&bad), "--out", s(&out)])), 2);
    std::fs::write(&bad, "{\"iters_cascade\": 0}").unwrap();
    assert_eq!(code(&mplreg(&["register", "--case", s(&case), "--config", s(&bad), "--out", s(&out)])), 2);
    assert!(!out.exists());
    assert_eq!(code(&mplreg(&["register", "--fixed", s(&case.join("fixed.nii")), "--out", s(&out)])), 2);
    assert_eq!(code(&mplreg(&["phantom", "--dims", "3", "--out", s(&out)])), 2);
    assert_eq!(code(&Command::new(env!("CARGO_BIN_EXE_mplreg")).args(["check-grad"]).env("MPLREG_THREADS", "0").output().unwrap()), 2);
}

#[test]
fn divergence_exits_3_with_partial_outputs() {
    let t = TempDir::new().unwrap();
    let (case, _) = small_case(t.path(), 7);
    let cfg = t.path().join("wild.json");
    std::fs::write(&cfg, r#"{"cascades": 2, "iters_affine": 5, "iters_cascade": 5, "step_size": 1e38, "preprocess": {"enabled": false}}"#).unwrap();
    let out = t.path().join("run");
    let o = mplreg(&["register", "--case", s(&case), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("partial_field.nii").exists());
    assert!(!out.join("metrics.json").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["status"], "diverged");
    let stages: serde_json::Value = serde_json::from_slice(&read(out.join("stages.json"))).unwrap();
    assert_eq!(stages["stages"][0]["kind"], "affine");
}

#[test]
fn check_grad_passes_and_enforces_size() {
    let o = mplreg(&["check-grad", "--dims", "5", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    for term in ["quadratic self-test", "MI wrt field", "GPL wrt field", "MPL wrt affine", "MPL wrt field"] {
        assert!(text.contains(term), "{term}");
    }
    assert_eq!(code(&mplreg(&["check-grad", "--dims", "9"])), 2);
}

fn cube_volume(n: usize, lo: [usize; 3], size: usize) -> Volume<f32> {
    let g = GridMeta::with_dims([n; 3]).unwrap();
    Volume::from_fn(g, |c| if (0..3).all(|a| c[a] >= lo[a] && c[a] < lo[a] + size) { 1.0 } else { 0.0 })
}

fn overlay(t: &Path, fixed: &Volume<f32>, moving: &Volume<f32>, extra: &[&str]) -> (Output, PathBuf) {
    let (f, m, png) = (t.join("f.nii"), t.join("m.nii"), t.join("o.png"));
    write_nifti(fixed, &f).unwrap();
    write_nifti(moving, &m).unwrap();
    let mut args = vec!["overlay", "--fixed", s(&f), "--moving", s(&m), "--out", s(&png)];
    args.extend_from_slice(extra);
    (mplreg(&args), png)
}

/// Columns of the burned-in pixels, using a window that keeps the fixed
/// image below 255.
fn edge_columns(img: &image::GrayImage) -> Vec<u32> {
    img.enumerate_pixels().filter(|(_, _, p)| p.0[0] == 255).map(|(x, _, _)| x).collect()
}

#[test]
fn overlay_edges_track_the_moving_image() {
    let t = TempDir::new().unwrap();
    let fixed = cube_volume(24, [6, 6, 6], 10);
    let window = ["--window", "2", "--level", "1"];
    let (o, png) = overlay(t.path(), &fixed, &fixed, &window);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let same = image::open(&png).unwrap().to_luma8();
    assert_eq!(same.dimensions(), (24, 24));
    // burned pixels sit where the fixed slice changes
    for (x, y, p) in same.enumerate_pixels() {
        if p.0[0] == 255 {
            let (x, y) = (x as usize, y as usize);
            let v = |i: usize, j: usize| fixed.get(i, j, 12);
            let near: Vec<f32> = [(x.saturating_sub(1), y), ((x + 1).min(23), y), (x, y.saturating_sub(1)), (x, (y + 1).min(23))]
                .iter()
                .map(|&(i, j)| v(i, j))
                .collect();
            assert!(near.iter().any(|&n| n != v(x, y)), "edge at ({x}, {y}) away from the fixed boundary");
        }
    }
    let base = edge_columns(&same);
    assert!(!base.is_empty());

    let shifted = cube_volume(24, [9, 6, 6], 10);
    let (o, png) = overlay(t.path(), &fixed, &shifted, &window);
    assert_eq!(code(&o), 0);
    let moved = edge_columns(&image::open(&png).unwrap().to_luma8());
    let mean = |c: &[u32]| c.iter().map(|&x| x as f64).sum::<f64>() / c.len() as f64;
    assert_eq!(mean(&moved) - mean(&base), 3.0);

    let (o, _) = overlay(t.path(), &fixed, &fixed, &["--index", "24"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn overlay_of_a_128_cube_is_128_square() {
    let t = TempDir::new().unwrap();
    let v = cube_volume(128, [40, 40, 40], 50);
    let (o, png) = overlay(t.path(), &v, &v, &["--axis", "z", "--index", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(image::open(&png).unwrap().to_luma8().dimensions(), (128, 128));
}

#[test]
fn suite_reports_every_case() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("quick.json");
    std::fs::write(&cfg, QUICK).unwrap();
    let out = t.path().join("suite");
    let args = ["suite", "--cases", "3", "--jobs", "2", "--dims", "16", "--amplitude", "1", "--smoothness", "2", "--config", s(&cfg), "--out", s(&out)];
    let o = mplreg(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(read(out.join("report.md"))).unwrap();
    for row in ["| seed 0 |", "| seed 1 |", "| seed 2 |", "| Initial (mean) |", "| MPL (mean) |"] {
        assert!(table.contains(row), "{row}\n{table}");
    }
    let report: serde_json::Value = serde_json::from_slice(&read(out.join("suite.json"))).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 3);

    // cases run concurrently give the same numbers as one at a time
    let serial = t.path().join("serial");
    let mut args1 = args.to_vec();
    args1[4] = "1";
    *args1.last_mut().unwrap() = s(&serial);
    assert_eq!(code(&mplreg(&args1)), 0);
    let dice = |p: &Path| -> Vec<f64> {
        let v: serde_json::Value = serde_json::from_slice(&read(p.join("suite.json"))).unwrap();
        v["cases"].as_array().unwrap().iter().map(|c| c["metrics"]["dice"].as_f64().unwrap()).collect()
    };
    assert_eq!(dice(&out), dice(&serial));
}

#[test]
fn soft_labels_survive_the_metrics_reader() {
    let t = TempDir::new().unwrap();
    let g = GridMeta::with_dims([4, 4, 4]).unwrap();
    let soft = LabelMask::new(Volume::from_fn(g, |c| if c[0] < 2 { 0.6f32 } else { 0.4 })).unwrap();
    let hard = LabelMask::<f32>::from_fn(g, |c| c[0] < 2);
    let (a, b) = (t.path().join("soft.nii"), t.path().join("hard.nii"));
    write_nifti(soft.as_volume(), &a).unwrap();
    write_nifti(hard.as_volume(), &b).unwrap();
    let o = mplreg(&["metrics", "--warped-label", s(&a), "--fixed-label", s(&b)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"dice\": 1.0"));
}
