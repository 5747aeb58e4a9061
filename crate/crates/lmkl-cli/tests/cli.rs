//! End-to-end tests of the `lmkl` binary: pipeline behavior, exit codes,
//! config precedence, and run-to-run determinism of the written artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lmkl")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (code {:?})\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Build a tiny gauss2 dataset and its kernel files inside `dir`.
fn prepare_kernels(dir: &Path) {
    assert_ok(
        &run_in(
            dir,
            &[
                "synth",
                "--kind",
                "gauss2",
                "--train",
                "40",
                "--test",
                "20",
                "--seed",
                "7",
                "--out-train",
                "tr.libsvm",
                "--out-test",
                "te.libsvm",
            ],
        ),
        "synth",
    );
    assert_ok(
        &run_in(
            dir,
            &["kernels", "--data", "tr.libsvm", "--out", "tr.kern", "--count", "3"],
        ),
        "train kernels",
    );
    assert_ok(
        &run_in(
            dir,
            &[
                "kernels",
                "--data",
                "te.libsvm",
                "--train-data",
                "tr.libsvm",
                "--out",
                "te.kern",
                "--count",
                "3",
            ],
        ),
        "cross kernels",
    );
}

fn train_args(out_dir: &str) -> Vec<String> {
    [
        "train",
        "--kernels",
        "tr.kern",
        "--labels",
        "tr.labels",
        "--test-kernels",
        "te.kern",
        "--test-labels",
        "te.labels",
        "--out-dir",
        out_dir,
        "--epochs",
        "6",
        "--hidden",
        "12",
        "--batch-size",
        "16",
        "--lr",
        "0.01",
        "--seeds",
        "0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_strings(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_in(dir, &refs)
}

/// Strip the wall-clock column so metric files can be compared across runs.
fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    prepare_kernels(dir.path());
    for name in ["tr.libsvm", "te.libsvm", "tr.kern", "tr.labels", "te.kern", "te.labels"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let out = run_strings(dir.path(), &train_args("runs"));
    assert_ok(&out, "train");
    let text = stdout(&out);
    assert!(text.contains("seed 0:"), "summary line missing:\n{text}");
    assert!(text.contains("mean test_acc"), "mean line missing:\n{text}");

    let ckpt = dir.path().join("runs/model-seed0.ckpt");
    let metrics = dir.path().join("runs/metrics-seed0.csv");
    assert!(ckpt.exists() && metrics.exists());
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,test_loss,test_acc,seconds");
    assert_eq!(lines.len(), 7, "6 epochs of metrics plus header");

    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "runs/model-seed0.ckpt",
            "--kernels",
            "te.kern",
            "--labels",
            "te.labels",
        ],
    );
    assert_ok(&out, "eval");
    let text = stdout(&out);
    assert!(text.contains("examples 20"), "{text}");
    let acc_line = text
        .lines()
        .find(|l| l.starts_with("accuracy "))
        .expect("accuracy line");
    let acc: f64 = acc_line["accuracy ".len()..].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = run_in(
        dir.path(),
        &[
            "gating",
            "--checkpoint",
            "runs/model-seed0.ckpt",
            "--kernels",
            "tr.kern",
            "--labels",
            "tr.labels",
            "--out",
            "gating.txt",
            "--samples",
            "4",
        ],
    );
    assert_ok(&out, "gating");
    let gating = std::fs::read_to_string(dir.path().join("gating.txt")).unwrap();
    assert!(gating.starts_with("gating-export v1"));
    assert!(gating.contains("sample 0 label"));
    assert!(gating.contains("class 0 count"));
}

#[test]
fn training_artifacts_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    prepare_kernels(dir.path());
    assert_ok(&run_strings(dir.path(), &train_args("a")), "first run");
    assert_ok(&run_strings(dir.path(), &train_args("b")), "second run");

    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(
        read("a/model-seed0.ckpt"),
        read("b/model-seed0.ckpt"),
        "checkpoints differ between identical runs"
    );
    let csv_a = String::from_utf8(read("a/metrics-seed0.csv")).unwrap();
    let csv_b = String::from_utf8(read("b/metrics-seed0.csv")).unwrap();
    assert_eq!(strip_seconds(&csv_a), strip_seconds(&csv_b));

    // a different seed must change the model
    let mut args = train_args("c");
    let pos = args.iter().position(|a| a == "--seeds").unwrap();
    args[pos + 1] = "1".into();
    assert_ok(&run_strings(dir.path(), &args), "third run");
    assert_ne!(read("a/model-seed0.ckpt"), read("c/model-seed1.ckpt"));
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    prepare_kernels(dir.path());
    std::fs::write(
        dir.path().join("train.conf"),
        "epochs = 4\nhidden = 12\nbatch_size = 16\nlr = 0.01\n",
    )
    .unwrap();

    // config alone: 4 epochs of metrics
    let out = run_in(
        dir.path(),
        &[
            "train", "--kernels", "tr.kern", "--labels", "tr.labels", "--out-dir", "cfg",
            "--config", "train.conf",
        ],
    );
    assert_ok(&out, "config train");
    let csv = std::fs::read_to_string(dir.path().join("cfg/metrics-seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header plus 4 epochs:\n{csv}");

    // the flag beats the file
    let out = run_in(
        dir.path(),
        &[
            "train", "--kernels", "tr.kern", "--labels", "tr.labels", "--out-dir", "flag",
            "--config", "train.conf", "--epochs", "2",
        ],
    );
    assert_ok(&out, "flag train");
    let csv = std::fs::read_to_string(dir.path().join("flag/metrics-seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus 2 epochs:\n{csv}");
}

#[test]
fn multiple_seeds_produce_one_model_each() {
    let dir = tempfile::tempdir().unwrap();
    prepare_kernels(dir.path());
    let mut args = train_args("multi");
    let pos = args.iter().position(|a| a == "--seeds").unwrap();
    args[pos + 1] = "0,1".into();
    let out = run_strings(dir.path(), &args);
    assert_ok(&out, "multi-seed train");
    assert!(dir.path().join("multi/model-seed0.ckpt").exists());
    assert!(dir.path().join("multi/model-seed1.ckpt").exists());
    let text = stdout(&out);
    assert!(text.contains("over 2 seeds"), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    // synth kind goes through a value parser, so a bad value is usage too
    let out = run_in(
        dir.path(),
        &["synth", "--kind", "spirals", "--out-train", "x.libsvm"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn input_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // missing file
    let out = run_in(
        dir.path(),
        &[
            "train", "--kernels", "missing.kern", "--labels", "missing.labels", "--out-dir", "r",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // malformed kernel file
    std::fs::write(dir.path().join("junk.kern"), b"not a kernel file").unwrap();
    std::fs::write(dir.path().join("junk.labels"), "0\n1\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--kernels", "junk.kern", "--labels", "junk.labels", "--out-dir", "r",
        ],
    );
    assert_eq!(out.status.code(), Some(3));

    // label count mismatch against a valid kernel file
    prepare_kernels(dir.path());
    std::fs::write(dir.path().join("short.labels"), "0\n1\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "eval", "--checkpoint", "nope.ckpt", "--kernels", "tr.kern", "--labels",
            "short.labels",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn failed_gradient_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // a coarse step makes the central difference diverge from the exact
    // gradient by its truncation error, far beyond this tolerance
    let out = run_in(
        dir.path(),
        &[
            "gradcheck",
            "--examples",
            "16",
            "--hidden",
            "8",
            "--batch",
            "10",
            "--seeds",
            "1",
            "--eps",
            "1e-2",
            "--tol",
            "1e-10",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAILED"));

    // the honest configuration passes
    let out = run_in(dir.path(), &["gradcheck", "--seeds", "1"]);
    assert_ok(&out, "default gradcheck");
    assert!(stdout(&out).contains("all gradients within"));
}

#[test]
fn cross_kernels_keep_train_label_space() {
    let dir = tempfile::tempdir().unwrap();
    prepare_kernels(dir.path());
    // the cross stack has rows for the 20 test examples against the 40
    // training examples; its labels file must hold 20 internal class ids
    let labels = std::fs::read_to_string(dir.path().join("te.labels")).unwrap();
    let ids: Vec<usize> = labels
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    assert_eq!(ids.len(), 20);
    assert!(ids.iter().all(|&l| l <= 1));
    assert!(ids.contains(&0) && ids.contains(&1));
}

#[test]
fn synth_requires_test_output_when_test_requested() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "synth", "--kind", "rings", "--train", "10", "--test", "5", "--out-train",
            "tr.libsvm",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    // with --test 0 the test output is optional
    let out = run_in(
        dir.path(),
        &[
            "synth", "--kind", "rings", "--train", "10", "--test", "0", "--out-train",
            "tr.libsvm",
        ],
    );
    assert_ok(&out, "synth without test split");
}
