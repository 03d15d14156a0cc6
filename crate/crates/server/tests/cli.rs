use std::path::{Path, PathBuf};
use std::process::Command;

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seldinger"))
}

fn run_script(dir: &Path, extra: &[&str]) -> (std::process::Output, PathBuf) {
    let log = dir.join("session.jsonl");
    let out = bin()
        .arg("run-script")
        .arg(data("scripts/canonical.json"))
        .arg("--phantom")
        .arg(data("phantoms/human.json"))
        .arg("--config")
        .arg(data("configs/human.json"))
        .args(["--seed", "4", "--log"])
        .arg(&log)
        .args(extra)
        .output()
        .unwrap();
    (out, log)
}

#[test]
fn run_script_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let (out, log) = run_script(dir.path(), &["--frames", frames.to_str().unwrap(), "--frame-every", "500"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["phase"], "Complete");
    assert_eq!(summary["outcome"]["success"], true);
    let pgm = std::fs::read(frames.join("frame_00000500.pgm")).unwrap();
    let (w, h, px) = seldinger_core::imaging::UltrasoundFrame::parse_pgm(&pgm).unwrap();
    assert_eq!((w, h, px.len()), (640, 480, 640 * 480));
    assert!(std::fs::read_to_string(&log).unwrap().contains(r#""file":"frame_00000500.pgm""#));

    let out = bin()
        .arg("replay")
        .arg(&log)
        .arg("--phantom")
        .arg(data("phantoms/human.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["divergence"].is_null());

    // replaying against the other phantom is refused
    let out = bin().arg("replay").arg(&log).arg("--phantom").arg(data("phantoms/porcine.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom hash mismatch"));
}

#[test]
fn sweep_then_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep.jsonl");
    let params = dir.path().join("params.json");
    let st = bin()
        .args(["sweep", "--config"])
        .arg(data("configs/human.json"))
        .arg("--out")
        .arg(&sweep)
        .args(["--noise", "0"])
        .status()
        .unwrap();
    assert!(st.success());
    let out = bin().args(["calibrate", "--sweep"]).arg(&sweep).args(["--x-scale", "16", "--out"]).arg(&params).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["rms_px"].as_f64().unwrap() < 1e-6);
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&params).unwrap()).unwrap();
    assert!((p["p_l"].as_f64().unwrap() - 0.1).abs() < 1e-9);
    assert_eq!(p["x_scale"].as_f64().unwrap(), 16.0);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, "{}").unwrap();
    let out = bin().args(["replay"]).arg(&bogus).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["calibrate", "--sweep"]).arg(&bogus).args(["--x-scale", "16", "--out"]).arg(dir.path().join("p")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
