use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_canopy-align"));
    cmd.env("CANOPY_ALIGN_THREADS", "1");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, plot: &str, seed: &str) {
    let out = run(&["simulate", "--table1-plot", plot, "--seed", seed, "--out-dir", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn eval_json(args: &[&str]) -> Value {
    let out = run(&[&["eval", "--json"], args].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_register_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "3", "11");
    for f in ["uls.xyz", "ground.xyz", "truth.json", "uls_labels.txt", "ground_labels.txt", "correspondences.txt"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let p = |f: &str| d.join(f).to_str().unwrap().to_string();
    let out = run(&[
        "register",
        "--reference",
        &p("uls.xyz"),
        "--moving",
        &p("ground.xyz"),
        "--out",
        &p("report.json"),
        "--out-transform",
        &p("est.json"),
        "--correspondences",
        &p("correspondences.txt"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, serde_json::from_str::<Value>(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap());
    for key in ["filtering", "ground_alignment", "image_matching", "icp", "coarse_total"] {
        assert!(report["timing"][key].is_number(), "timing.{key}");
    }

    let metrics = eval_json(&["--transform", &p("est.json"), "--truth", &p("truth.json"), "--correspondences", &p("correspondences.txt")]);
    assert!(metrics["rotation_error_deg"].as_f64().unwrap() <= 1.0);
    assert!(metrics["rmse"]["rmse"].as_f64().unwrap() <= 0.21);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), "3", "5");
    simulate(b.path(), "3", "5");
    for f in ["uls.xyz", "ground.xyz", "truth.json", "ground_labels.txt", "spec.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn suite_plot_one_has_about_nineteen_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--table1-plot", "1", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(out.status.success());
    let line = String::from_utf8_lossy(&out.stdout);
    let trees: usize = line.split(": ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((15..=23).contains(&trees), "{line}");
}

#[test]
fn unknown_suite_plot_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--table1-plot", "7", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let out = run(&["register", "--reference", "/nonexistent/uls.xyz", "--moving", "/nonexistent/g.xyz"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/uls.xyz"));
}

#[test]
fn self_registration_recovers_identity() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "3", "2");
    let uls = tmp.path().join("uls.xyz");
    let uls = uls.to_str().unwrap();
    let out = run(&["register", "--reference", uls, "--moving", uls, "--coarse-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["theta_deg"].as_f64().unwrap().abs() < 0.5);
    assert!(report["icp"].is_null());
}

#[test]
fn rejected_match_exits_3_with_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "3", "3");
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    let out = run(&[
        "register",
        "--reference",
        &p("uls.xyz"),
        "--moving",
        &p("ground.xyz"),
        "--set",
        "match_accept_overlap=0.9999",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

#[test]
fn debug_dir_and_raster_debug_write_stage_images() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "3", "1");
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    let out = run(&["register", "--reference", &p("uls.xyz"), "--moving", &p("ground.xyz"), "--coarse-only", "--debug-dir", &p("dbg")]);
    assert!(out.status.success());
    for f in ["reference_raw.pgm", "moving_median.pgm", "candidates.csv", "reference_keypoints.csv"] {
        assert!(tmp.path().join("dbg").join(f).exists(), "{f}");
    }
    let out = run(&["raster-debug", "--input", &p("uls.xyz"), "--out-dir", &p("stages")]);
    assert!(out.status.success());
    for f in ["raw.pgm", "dilated.pgm", "eroded.pgm", "median.pgm"] {
        let bytes = fs::read(tmp.path().join("stages").join(f)).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
    }
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t.json");
    fs::write(
        &t,
        r#"{"rotation":[0,-1,0,1,0,0,0,0,1],"translation":[3.5,-2.0,1.25]}"#,
    )
    .unwrap();
    let t = t.to_str().unwrap();
    let m = eval_json(&["--transform", t, "--truth", t, "--at", "-4,2,1"]);
    assert_eq!(m["rotation_error_deg"].as_f64().unwrap(), 0.0);
    assert!(m["translation_error"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() == 0.0));
}

#[test]
fn eval_statistics_match_direct_formula() {
    let tmp = tempfile::tempdir().unwrap();
    let ident = tmp.path().join("id.json");
    fs::write(&ident, r#"{"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]}"#).unwrap();

    let single = tmp.path().join("one.txt");
    fs::write(&single, "0 0 0 0.3 0 1\n").unwrap();
    let m = eval_json(&["--transform", ident.to_str().unwrap(), "--correspondences", single.to_str().unwrap()]);
    assert!((m["rmse"]["rmse"].as_f64().unwrap() - 0.3).abs() < 1e-12);

    // Fifteen features with horizontal distances 0.06..=0.15 m.
    let dists: Vec<f64> = (0..15).map(|i| 0.06 + 0.09 * i as f64 / 14.0).collect();
    let mut text = String::from("# moving reference\n");
    for (i, d) in dists.iter().enumerate() {
        let a = i as f64 * 0.7;
        text.push_str(&format!("{} {} 5 {} {} 5.2\n", i, -(i as f64), i as f64 + d * a.cos(), -(i as f64) + d * a.sin()));
    }
    let many = tmp.path().join("many.txt");
    fs::write(&many, text).unwrap();
    let m = eval_json(&["--transform", ident.to_str().unwrap(), "--correspondences", many.to_str().unwrap()]);
    let avg = dists.iter().sum::<f64>() / 15.0;
    let rmse = (dists.iter().map(|d| d * d).sum::<f64>() / 15.0).sqrt();
    assert!((m["rmse"]["min"].as_f64().unwrap() - 0.06).abs() < 1e-5);
    assert!((m["rmse"]["max"].as_f64().unwrap() - 0.15).abs() < 1e-5);
    assert!((m["rmse"]["avg"].as_f64().unwrap() - avg).abs() < 1e-5);
    assert!((m["rmse"]["rmse"].as_f64().unwrap() - rmse).abs() < 1e-5);
}
