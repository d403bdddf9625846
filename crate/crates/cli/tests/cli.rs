use std::path::Path;
use std::process::{Command, Output};

use rawhdr::formats::{read_hdr, read_raw};
use rawhdr::metrics::MetricReport;

fn rawhdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawhdr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = rawhdr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().expect("a summary line")).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().expect("an error line")).expect("machine-readable error")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, scenes: &str, size: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--scenes", scenes, "--size", size, "--seed", "3", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_then_eval_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "32x32", &[]);
    let ckpt = dir.path().join("init.rhnp");
    ok(&["init", "--seed", "1", "--out", p(&ckpt)]);
    let report = dir.path().join("report.json");
    let summary = ok(&[
        "eval",
        "--manifest",
        p(&data.join("manifest.json")),
        "--checkpoint",
        p(&ckpt),
        "--mu",
        "5000",
        "--report",
        p(&report),
    ]);
    assert_eq!(summary["scenes"], 2);
    let records: Vec<MetricReport> = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert!(r.psnr.is_finite() && r.psnr_mu.is_finite() && r.ssim.is_finite());
        assert_eq!(r.mu, 5000.0);
    }
}

#[test]
fn infer_writes_readable_hdr() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "16x24", &[]);
    let ckpt = dir.path().join("m.rhnp");
    ok(&["init", "--out", p(&ckpt)]);
    let out = dir.path().join("pred.rhdr");
    ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--raw",
        p(&dir.path().join("scene0000_ev+0.pgm")),
        "--out",
        p(&out),
    ]);
    let hdr = read_hdr(&out).unwrap();
    assert_eq!(hdr.shape(), [8, 12, 4]);
}

#[test]
fn merge_matches_synthesized_target() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "16x16", &[]);
    let frames: Vec<String> = ["-3", "+0", "+3"]
        .iter()
        .map(|ev| p(&dir.path().join(format!("scene0000_ev{ev}.pgm"))).to_string())
        .collect();
    let out = dir.path().join("merged.rhdr");
    let mut args = vec!["merge", "--stack"];
    args.extend(frames.iter().map(String::as_str));
    args.extend(["--evs", "-3,0,3", "--out", p(&out)]);
    ok(&args);
    assert_eq!(read_hdr(&out).unwrap(), read_hdr(&dir.path().join("scene0000.rhdr")).unwrap());

    // exposure values that contradict the sidecars are rejected
    let mut bad = vec!["merge", "--stack"];
    bad.extend(frames.iter().map(String::as_str));
    bad.extend(["--evs", "-2,0,2", "--out", p(&out)]);
    let res = rawhdr(&bad);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_line(&res)["error"]["kind"], "argument");
}

#[test]
fn analyze_channels_on_neutral_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "32x32", &["--neutral"]);
    let out = dir.path().join("analysis");
    let summary = ok(&["analyze-channels", "--manifest", p(&data.join("manifest.json")), "--out", p(&out)]);
    assert_eq!(summary["green_blue_red_order"], true);
    assert!(summary["dominant_fraction"][1].as_f64().unwrap() >= 0.9);
    assert!(out.join("channels.json").exists());
    assert!(out.join("scene0000_dominant.pgm").exists());
}

#[test]
fn train_writes_checkpoint_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "16x16", &[]);
    let net = dir.path().join("net.json");
    std::fs::write(&net, r#"{"base_width": 8, "mask_width": 8}"#).unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 2, "crop_size": 8, "seed": 5}"#).unwrap();
    let out = dir.path().join("run");
    let manifest = data.join("manifest.json");
    let args = [
        "train",
        "--manifest",
        p(&manifest),
        "--net-config",
        p(&net),
        "--train-config",
        p(&cfg),
        "--holdout",
        p(&manifest),
        "--out",
        p(&out),
    ];
    let last = ok(&args);
    assert_eq!(last["epoch"], 1);
    assert!(last["holdout_psnr_mu"].as_f64().is_some());
    let first_model = std::fs::read(out.join("model.rhnp")).unwrap();

    // already complete: resuming runs no further epochs
    let res = rawhdr(&args);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).trim().is_empty());
    assert_eq!(std::fs::read(out.join("model.rhnp")).unwrap(), first_model);

    // more epochs continue from the saved state
    std::fs::write(&cfg, r#"{"epochs": 3, "crop_size": 8, "seed": 5}"#).unwrap();
    assert_eq!(ok(&args)["epoch"], 2);
}

#[test]
fn grad_check_passes_and_rejects_unknown_ops() {
    let summary = ok(&["grad-check", "--op", "lewin_block", "--seed", "0"]);
    assert!(summary["max_rel_error"].as_f64().unwrap() <= 1e-4);

    let res = rawhdr(&["grad-check", "--op", "nonsense"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_line(&res)["error"]["kind"], "argument");

    let res = rawhdr(&["grad-check", "--op", "log_l2", "--tolerance", "0"]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(error_line(&res)["error"]["kind"], "check_failed");
}

#[test]
fn usage_and_missing_file_errors_are_machine_readable() {
    let res = rawhdr(&["synth", "--scenes", "1", "--bogus"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_line(&res)["error"]["kind"], "usage");

    let res = rawhdr(&["infer", "--checkpoint", "/nonexistent.rhnp", "--raw", "/x.pgm", "--out", "/tmp/x"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_line(&res)["error"]["kind"], "io");

    let res = rawhdr(&["synth", "--scenes", "1", "--size", "12", "--out", "/tmp/x"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn written_raws_keep_their_metadata() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "8x8", &[]);
    let m = read_raw(&dir.path().join("scene0000_ev-3.pgm")).unwrap();
    assert_eq!((m.exposure_ev, m.bit_depth, m.black_level, m.white_level), (-3.0, 14, 512, 16383));
}
