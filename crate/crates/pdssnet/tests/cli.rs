//! End-to-end tests of the `pdssnet` binary: each subcommand is driven
//! through a real child process, checking written files, determinism,
//! stdout reports, and the exit-code contract (0 ok, 2 validation,
//! 3 i/o, 4 numeric).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small run config shared by the tests: 2 classes, 4 features, 2 state
/// components, 8-pixel tiles, 25 steps. Partial JSON — remaining fields
/// take their defaults.
const TINY_CFG: &str = r#"{
  "n_cls": 2, "c_feat": 4, "n_state": 2, "tile": 8,
  "lr": 0.05, "steps": 25, "seed": 11
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdssnet"))
}

/// Fresh per-test scratch directory (recreated on every run).
fn scratch(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pdssnet-cli-{label}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should exit, not be signalled")
}

fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

#[test]
fn gen_fixtures_is_deterministic_and_covers_all_classes() {
    let dir = scratch("genfix");
    let cfg = write_cfg(&dir, TINY_CFG);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let r = run(&[
            "gen-fixtures",
            "--tiles",
            "8",
            "--config",
            &s(&cfg),
            "--out",
            &s(out),
        ]);
        assert_ok(&r, "gen-fixtures");
    }

    // Same seed, same bytes — manifest and tile files alike.
    for name in ["manifest.json", "tile_000.image.pdst", "tile_007.labels.pdst"] {
        assert_eq!(
            read_bytes(&a.join(name)),
            read_bytes(&b.join(name)),
            "{name} differs between identically-seeded runs"
        );
    }

    // The manifest's class histogram covers every class and counts every pixel.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let hist: Vec<f64> = manifest["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(hist.len(), 2, "one histogram bucket per class");
    assert!(hist.iter().all(|&c| c > 0.0), "every class appears somewhere");
    assert_eq!(
        hist.iter().sum::<f64>(),
        (8 * 8 * 8) as f64,
        "histogram accounts for all labelled pixels"
    );
}

#[test]
fn train_forward_metrics_pipeline() {
    let dir = scratch("pipeline");
    let cfg = write_cfg(&dir, TINY_CFG);
    let fixtures = dir.join("fixtures");
    let r = run(&[
        "gen-fixtures",
        "--tiles",
        "8",
        "--config",
        &s(&cfg),
        "--out",
        &s(&fixtures),
    ]);
    assert_ok(&r, "gen-fixtures");

    // Train: checkpoint, loss trace, held-out report.
    let trained = dir.join("trained");
    let r = run(&[
        "train-toy",
        "--data",
        &s(&fixtures),
        "--config",
        &s(&cfg),
        "--out",
        &s(&trained),
    ]);
    assert_ok(&r, "train-toy");
    let csv = std::fs::read_to_string(trained.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss_ce,loss_dice,loss_total"));
    assert_eq!(lines.count(), 25, "one CSV row per training step");
    assert!(trained.join("checkpoint/manifest.json").exists());
    assert!(trained.join("checkpoint/tensors/memory.pdst").exists());
    let held: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(trained.join("heldout_metrics.json")).unwrap())
            .unwrap();
    let oa = held["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa), "held-out accuracy in range, got {oa}");

    // Forward from the checkpoint: logits plus argmax map, and a second
    // run produces the same bytes.
    let fwd = dir.join("fwd");
    for _ in 0..2 {
        let r = run(&[
            "forward",
            "--checkpoint",
            &s(&trained.join("checkpoint")),
            "--input",
            &s(&fixtures.join("tile_000.image.pdst")),
            "--out",
            &s(&fwd),
        ]);
        assert_ok(&r, "forward");
    }
    let logits1 = read_bytes(&fwd.join("logits.pdst"));
    let pred1 = read_bytes(&fwd.join("pred.pdst"));
    let r = run(&[
        "forward",
        "--checkpoint",
        &s(&trained.join("checkpoint")),
        "--input",
        &s(&fixtures.join("tile_000.image.pdst")),
        "--out",
        &s(&fwd),
    ]);
    assert_ok(&r, "forward repeat");
    assert_eq!(logits1, read_bytes(&fwd.join("logits.pdst")), "logits drift between runs");
    assert_eq!(pred1, read_bytes(&fwd.join("pred.pdst")), "argmax map drifts between runs");

    // Metrics: score the ground-truth maps against themselves — everything
    // must come out exactly perfect.
    let (gts, preds) = (dir.join("gts"), dir.join("preds"));
    std::fs::create_dir_all(&gts).unwrap();
    std::fs::create_dir_all(&preds).unwrap();
    for i in 0..8 {
        let name = format!("tile_{i:03}.labels.pdst");
        std::fs::copy(fixtures.join(&name), gts.join(&name)).unwrap();
        std::fs::copy(fixtures.join(&name), preds.join(&name)).unwrap();
    }
    let mdir = dir.join("mets");
    let r = run(&[
        "metrics",
        "--pred",
        &s(&preds),
        "--gt",
        &s(&gts),
        "--config",
        &s(&cfg),
        "--out",
        &s(&mdir),
    ]);
    assert_ok(&r, "metrics");
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(mdir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rep["overall_accuracy"].as_f64().unwrap(), 1.0);
    assert_eq!(rep["mean_iou"].as_f64().unwrap(), 1.0);
    assert_eq!(rep["mean_f1"].as_f64().unwrap(), 1.0);
}

#[test]
fn train_toy_rerun_is_byte_identical() {
    let dir = scratch("trainrepeat");
    let cfg = write_cfg(
        &dir,
        r#"{"n_cls":2,"c_feat":4,"n_state":2,"tile":8,"lr":0.05,"steps":10,"seed":3}"#,
    );
    let fixtures = dir.join("fixtures");
    assert_ok(
        &run(&["gen-fixtures", "--tiles", "6", "--config", &s(&cfg), "--out", &s(&fixtures)]),
        "gen-fixtures",
    );
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        assert_ok(
            &run(&["train-toy", "--data", &s(&fixtures), "--config", &s(&cfg), "--out", &s(out)]),
            "train-toy",
        );
    }
    for rel in [
        "loss.csv",
        "checkpoint/tensors/memory.pdst",
        "checkpoint/manifest.json",
        "heldout_metrics.json",
    ] {
        assert_eq!(
            read_bytes(&a.join(rel)),
            read_bytes(&b.join(rel)),
            "{rel} differs between identically-seeded training runs"
        );
    }
}

#[test]
fn gradcheck_scan_suite_passes() {
    let r = run(&["gradcheck", "--scale", "scan", "--seed", "5"]);
    assert_ok(&r, "gradcheck --scale scan");
    let text = String::from_utf8_lossy(&r.stdout).to_string();
    assert!(
        text.contains("max relative error"),
        "gradcheck should report its worst error, got:\n{text}"
    );
}

#[test]
fn bench_scan_reports_throughput() {
    let r = run(&[
        "bench-scan",
        "--len",
        "2048",
        "--d-ch",
        "2",
        "--chunk",
        "64",
        "--thread-counts",
        "1",
    ]);
    assert_ok(&r, "bench-scan");
    let text = String::from_utf8_lossy(&r.stdout).to_string();
    assert!(text.contains("tokens/s"), "throughput lines expected, got:\n{text}");
}

#[test]
fn exit_codes_follow_failure_classes() {
    let dir = scratch("exitcodes");
    let cfg = write_cfg(&dir, TINY_CFG);

    // Validation failures → 2.
    let r = run(&["train-toy", "--data", &s(&dir), "--config", &s(&cfg)]);
    assert_eq!(exit_code(&r), 2, "missing --out should be a validation failure");

    let bad_value = write_cfg(&dir, r#"{"n_cls": 0}"#);
    let r = run(&["gen-fixtures", "--config", &s(&bad_value), "--out", &s(&dir.join("x"))]);
    assert_eq!(exit_code(&r), 2, "config with invalid value should fail validation");

    let bad_syntax = dir.join("broken.json");
    std::fs::write(&bad_syntax, "{not json").unwrap();
    let r = run(&["gen-fixtures", "--config", &s(&bad_syntax), "--out", &s(&dir.join("y"))]);
    assert_eq!(exit_code(&r), 2, "unparseable config should fail validation");

    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = run(&["metrics", "--pred", &s(&empty), "--gt", &s(&empty)]);
    assert_eq!(exit_code(&r), 2, "metrics over an empty directory has nothing to score");

    let r = run(&["no-such-command"]);
    assert_eq!(exit_code(&r), 2, "clap rejects unknown subcommands with 2");

    // I/O failures → 3.
    let r = run(&[
        "forward",
        "--checkpoint",
        &s(&dir.join("missing-checkpoint")),
        "--input",
        &s(&dir.join("missing.pdst")),
        "--out",
        &s(&dir.join("z")),
    ]);
    assert_eq!(exit_code(&r), 3, "missing checkpoint directory is an i/o failure");

    let r = run(&["train-toy", "--data", &s(&dir.join("no-fixtures")), "--config", &s(&cfg), "--out", &s(&dir.join("w"))]);
    assert_eq!(exit_code(&r), 3, "missing fixture directory is an i/o failure");
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let dir = scratch("diverge");
    // A step size this absurd drives the parameters to overflow within a
    // few updates; the training loop must notice the non-finite loss, abort
    // without writing a checkpoint, and exit 4.
    let cfg = write_cfg(
        &dir,
        r#"{"n_cls":2,"c_feat":4,"n_state":2,"tile":8,"lr":1e12,"steps":40,"seed":3}"#,
    );
    let fixtures = dir.join("fixtures");
    assert_ok(
        &run(&["gen-fixtures", "--tiles", "6", "--config", &s(&cfg), "--out", &s(&fixtures)]),
        "gen-fixtures",
    );
    let out = dir.join("trained");
    let r = run(&["train-toy", "--data", &s(&fixtures), "--config", &s(&cfg), "--out", &s(&out)]);
    assert_eq!(
        exit_code(&r),
        4,
        "numeric blow-up should exit 4, stderr:\n{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(
        !out.join("checkpoint/manifest.json").exists(),
        "aborted run must not leave a checkpoint behind"
    );
}
