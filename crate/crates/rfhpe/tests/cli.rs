//! End-to-end checks of the command-line interface: flags, exit codes,
//! on-disk artifacts, and reproducibility of seeded invocations.

use std::path::Path;
use std::process::{Command, Output};

fn rfhpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfhpe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = rfhpe(&[
            "simulate",
            "--out",
            out.to_str().unwrap(),
            "--count",
            "10",
            "--material",
            "identity",
            "--seed",
            "7",
            "--deterministic",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(
        read(&a.join("normal-identity/frames.bin")),
        read(&b.join("normal-identity/frames.bin"))
    );
    assert_eq!(
        read(&a.join("normal-identity/manifest.json")),
        read(&b.join("normal-identity/manifest.json"))
    );
}

#[test]
fn simulate_reports_manifest_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let r = rfhpe(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--count",
        "10",
        "--material",
        "identity",
        "--seed",
        "3",
        "--deterministic",
    ]);
    assert!(r.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&read(
        &out.join("normal-identity/manifest.json"),
    ))
    .unwrap();
    assert_eq!(manifest["count"], 10);
    // reload oracle: the dataset reader agrees with the manifest
    let ds = rfhpe::io::Dataset::load(out.join("normal-identity")).unwrap();
    assert_eq!(ds.len(), 10);
}

#[test]
fn simulate_rejects_unknown_material_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = rfhpe(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--count",
        "2",
        "--material",
        "adamantium",
        "--seed",
        "1",
    ]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("adamantium"));
    for valid in ["identity", "plastic", "cardboard", "glass", "wood"] {
        assert!(stderr.contains(valid), "error should list {valid}: {stderr}");
    }
}

fn make_dataset(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let r = rfhpe(&[
        "simulate",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--material",
        "identity",
        "--seed",
        &seed.to_string(),
        "--deterministic",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    dir.join("normal-identity")
}

#[test]
fn pretrain_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 48, 5);
    let ckpt = dir.path().join("out/model.ckpt");
    let r = rfhpe(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "2",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(ckpt.exists());
    let history = std::fs::read_to_string(dir.path().join("out/model_history.csv")).unwrap();
    let rows: Vec<&str> = history.trim().lines().collect();
    assert_eq!(rows[0], "epoch,train_loss,val_pck");
    assert_eq!(rows.len(), 2, "one epoch, one row: {history}");
    // loadable checkpoint
    let w = rfhpe::io::load_checkpoint(&ckpt).unwrap();
    assert!(w.param_count() > 0);
}

#[test]
fn pretrain_alpha_one_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 24, 6);
    let ckpt = dir.path().join("a1.ckpt");
    let r = rfhpe(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--alpha",
        "1.0",
        "--seed",
        "2",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn pretrain_refuses_without_teacher_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 16, 7);
    std::fs::remove_file(data.join("teacher.bin")).unwrap();
    let r = rfhpe(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("x.ckpt").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("teacher"));
}

#[test]
fn adapt_refuses_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("no"), 32, 8);
    let r = rfhpe(&[
        "simulate",
        "--out",
        dir.path().join("oc").to_str().unwrap(),
        "--count",
        "16",
        "--material",
        "wood",
        "--seed",
        "9",
        "--deterministic",
    ]);
    assert!(r.status.success());
    // an untrained checkpoint cannot pass the PCK precondition
    let arch = rfhpe::net::Arch::desk(rfhpe::net::Variant::Complex);
    let weights = rfhpe::net::build_network(1, &arch).unwrap();
    let ckpt = dir.path().join("untrained.ckpt");
    rfhpe::io::save_checkpoint(&ckpt, &weights).unwrap();

    let r = rfhpe(&[
        "adapt",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data-no",
        data.to_str().unwrap(),
        "--val-no",
        data.to_str().unwrap(),
        "--data-oc",
        dir.path().join("oc").to_str().unwrap(),
        "--out",
        dir.path().join("adapted.ckpt").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(r.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("PCK"), "diagnostic should mention PCK: {stderr}");
}

#[test]
fn eval_writes_group_report_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 24, 10);
    let ckpt = dir.path().join("m.ckpt");
    let arch = rfhpe::net::Arch::desk(rfhpe::net::Variant::Complex);
    rfhpe::io::save_checkpoint(&ckpt, &rfhpe::net::build_network(3, &arch).unwrap()).unwrap();

    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    for out in [&out1, &out2] {
        let r = rfhpe(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let report = std::fs::read_to_string(out1.join("pck_report.csv")).unwrap();
    for group in ["MCP", "PIP", "DIP", "fingertip"] {
        assert!(report.contains(group));
    }
    // thresholds 0.05..0.2 present
    for a in ["0.05", "0.1", "0.15", "0.2"] {
        assert!(report.contains(a), "threshold {a} missing: {report}");
    }
    assert_eq!(read(&out1.join("pck_report.csv")), read(&out2.join("pck_report.csv")));
    assert!(out1.join("pck_curve.csv").exists());
}

#[test]
fn eval_requires_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 8, 11);
    std::fs::remove_file(data.join("poses.bin")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let arch = rfhpe::net::Arch::desk(rfhpe::net::Variant::Complex);
    rfhpe::io::save_checkpoint(&ckpt, &rfhpe::net::build_network(3, &arch).unwrap()).unwrap();
    let r = rfhpe(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert!(!r.status.success());
}

#[test]
fn infer_emits_21_keypoints_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&dir.path().join("ds"), 6, 12);
    let ckpt = dir.path().join("m.ckpt");
    let arch = rfhpe::net::Arch::desk(rfhpe::net::Variant::Complex);
    rfhpe::io::save_checkpoint(&ckpt, &rfhpe::net::build_network(5, &arch).unwrap()).unwrap();
    let out = dir.path().join("pose.csv");
    let r = rfhpe(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--index",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.trim().lines().count(), 22); // header + 21 keypoints

    // out-of-range index is a usage error
    let r = rfhpe(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--index",
        "99",
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_required_flag_is_usage_error() {
    let r = rfhpe(&["simulate", "--count", "3"]);
    assert_eq!(r.status.code(), Some(2));
}
