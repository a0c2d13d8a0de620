//! Acceptance criterion 9 (audit behavior and exit codes) plus the
//! command-line contract: exit codes, report determinism, and sweep output.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use nalgebra::DVector;

use conjugacy_core::gallery::{load_gallery, GalleryId};
use conjugacy_core::linear::LinearSystem;
use conjugacy_core::perturbation::{
    audit_hypotheses, AuditOptions, AuditStatus, HypothesisId, Perturbation,
};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_conjugacy")
}

fn run_config(dir: &Path, name: &str, body: &str, extra_args: &[&str]) -> (Output, std::path::PathBuf) {
    let cfg_path = dir.join(name);
    let out_dir = dir.join(format!("{name}.out"));
    let body = format!("{body}\n[output]\ndir = \"{}\"\n", out_dir.display());
    std::fs::write(&cfg_path, body).unwrap();
    let mut cmd = Command::new(bin());
    cmd.arg("--config").arg(&cfg_path);
    for a in extra_args {
        cmd.arg(a);
    }
    (cmd.output().unwrap(), out_dir)
}

fn report_json(out_dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn criterion_09_audit_behavior() {
    // Gallery audits pass through the library for G1-G3 and the smallness
    // margin shows up in the G1 report.
    for id in [GalleryId::G1, GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let report = audit_hypotheses(&gs.lin, &gs.pert, &AuditOptions::default()).unwrap();
        assert!(report.passed(), "{id:?} audit failed");
        assert_eq!(
            report.record(HypothesisId::Smallness).unwrap().status,
            AuditStatus::CertifiedOnGrid
        );
    }

    // A bounded perturbation leaves the growth probe inconclusive.
    let lin = Arc::new(LinearSystem::new(
        1,
        Arc::new(|_t| nalgebra::DMatrix::from_element(1, 1, -1.0)),
        5.0,
    ));
    let tanh = Perturbation::from_fn_fd(
        1,
        Arc::new(|_t, x: &DVector<f64>| DVector::from_element(1, 0.2 * x[0].tanh())),
    );
    let report = audit_hypotheses(&lin, &tanh, &AuditOptions::default()).unwrap();
    assert_eq!(
        report.record(HypothesisId::P4).unwrap().status,
        AuditStatus::ProbeInconclusive
    );

    // Binary: G1 audit exits 0 with the 0.75 margin in the report, X1 exits 1
    // naming smallness as the failed certificate.
    let tmp = tempfile::tempdir().unwrap();
    let (out, out_dir) = run_config(
        tmp.path(),
        "g1_audit.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"audit\"\nseed = 42\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = report_json(&out_dir);
    let margin = report["constants"]["smallness_margin"].as_f64().unwrap();
    assert!((margin - 0.75).abs() <= 1e-4, "margin {margin}");

    let (out, out_dir) = run_config(
        tmp.path(),
        "x1_audit.toml",
        "[system]\ngallery = \"X1\"\n[task]\nkind = \"audit\"\nseed = 42\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    let report = report_json(&out_dir);
    assert_eq!(report["status"], "fail");
    let failed: Vec<&str> = report["certificates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| !c["pass"].as_bool().unwrap())
        .map(|c| c["id"].as_str().unwrap())
        .collect();
    assert_eq!(failed, vec!["smallness"]);

    println!("acceptance criterion 09 (audit behavior and exit codes): PASS");
}

#[test]
fn malformed_dsl_exits_2_with_position() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = run_config(
        tmp.path(),
        "bad.toml",
        "[system]\nn = 1\nA = [\"-1\"]\nf = [\"x1 +\"]\n[task]\nkind = \"map\"\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("position 4"), "stderr: {stderr}");
}

#[test]
fn reports_are_byte_identical_for_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "[system]\ngallery = \"G1\"\n[task]\nkind = \"verify\"\nseed = 7\n";
    let (out, out_dir) = run_config(tmp.path(), "det.toml", body, &[]);
    assert_eq!(out.status.code(), Some(0));
    let first = std::fs::read(out_dir.join("report.json")).unwrap();
    let (out, out_dir) = run_config(tmp.path(), "det.toml", body, &[]);
    assert_eq!(out.status.code(), Some(0));
    let second = std::fs::read(out_dir.join("report.json")).unwrap();
    assert_eq!(first, second, "report.json differs between identical runs");
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, out_dir) = run_config(
        tmp.path(),
        "sweep.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"sweep\"\nseed = 42\nparameter = \"gamma-scale\"\nvalues = [0.5, 1.0, 3.9]\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "gamma,k_gamma_over_alpha,conj_residual,inv_residual,status");
    assert_eq!(lines.len(), 4, "expected header plus 3 rows: {csv}");
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));

    // Rows are a pure function of their value: the 1.0 row of a wider sweep
    // matches a single-value sweep byte for byte.
    let (out, single_dir) = run_config(
        tmp.path(),
        "sweep_single.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"sweep\"\nseed = 42\nparameter = \"gamma-scale\"\nvalues = [1.0]\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let single = std::fs::read_to_string(single_dir.join("sweep.csv")).unwrap();
    assert_eq!(single.lines().nth(1).unwrap(), lines[2], "base row differs between sweeps");

    // A scale past the contraction region flags the row instead of failing.
    let (out, out_dir) = run_config(
        tmp.path(),
        "sweep8.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"sweep\"\nseed = 42\nparameter = \"gamma-scale\"\nvalues = [8.0]\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with("outside-theorem"), "{csv}");
}

#[test]
fn unsafe_flag_marks_reports_outside_theorem() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "[system]\ngallery = \"X1\"\n[task]\nkind = \"verify\"\nseed = 42\n";
    let (out, _) = run_config(tmp.path(), "x1v.toml", body, &[]);
    assert_eq!(out.status.code(), Some(1), "gate must fail the run");
    let (out, out_dir) = run_config(tmp.path(), "x1v.toml", body, &["--unsafe-skip-smallness"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report_json(&out_dir)["status"], "outside-theorem");
}

#[test]
fn task_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, out_dir) = run_config(
        tmp.path(),
        "override.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"audit\"\nseed = 42\neval_points = [[2.0]]\nt_grid = [0.0, 1.0]\n",
        &["--task", "map"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("map_points.csv").exists());
}

#[test]
fn map_task_writes_point_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, out_dir) = run_config(
        tmp.path(),
        "map.toml",
        "[system]\ngallery = \"G1\"\n[task]\nkind = \"map\"\nseed = 42\neval_points = [[2.0]]\nt_grid = [0.0, 1.0]\n",
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("map_points.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,x1,h1,g1,h_residual,g_residual");
    assert_eq!(lines.len(), 3);
    // H(1, 2) = 2 e^{0.25}.
    let h_at_1: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!((h_at_1 - 2.0 * 0.25f64.exp()).abs() <= 1e-6, "H(1,2) = {h_at_1}");
}
