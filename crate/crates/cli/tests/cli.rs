use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
decoder.layers = 2
decoder.heads = 2
decoder.d = 16
decoder.ffn = 24
decoder.queries = 8
encoder.knn = 8
train.epochs = 2
train.val_count = 1
train.checkpoint_every = 1
train.voxel_size = 0.15
data.extent = 3,3,2
data.min_instances = 2
data.max_instances = 3
data.density = 60
data.min_gap = 0.2
";

fn maft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maft")).args(args).env("MAFT_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config, generates 3 scenes and trains for 2 epochs.
fn trained(dir: &Path) {
    std::fs::write(dir.join("tiny.txt"), TINY).unwrap();
    let cfg = dir.join("tiny.txt");
    let data = dir.join("data");
    let out = maft(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = maft(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.join("run"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&maft(&["frobnicate"])), 1);
    assert_eq!(code(&maft(&["train", "--data", "x"])), 1);
    assert_eq!(code(&maft(&["diagnose", "--kind", "recall_curve"])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_maft")).args(["diagnose", "--kind", "grad_check"]).env("MAFT_THREADS", "zero").output().unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&maft(&["--help"])), 0);
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "decoder.heads = 3\ndecoder.d = 16\n").unwrap();
    let out = maft(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    std::fs::write(&cfg, "nonsense.key = 1\n").unwrap();
    let out = maft(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nonsense.key"));
    let out = maft(&["eval", "--checkpoint", s(&dir.path().join("none.bin")), "--data", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_trace_log_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = maft(&["diagnose", "--kind", "matching_trace", "--run", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("traces.tsv"), "{}", stderr(&out));
}

#[test]
fn grad_check_passes_on_a_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(&cfg, TINY).unwrap();
    let out = maft(&["diagnose", "--kind", "grad_check", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("max\t")));
    assert!(dir.path().join("grad_check.tsv").exists());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    trained(root);
    let data = root.join("data");
    let run = root.join("run");
    assert!(data.join("manifest.tsv").exists());
    for f in ["train.tsv", "traces.tsv", "config.txt", "ckpt_e0001.bin", "ckpt_e0002.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("ckpt_e0002.bin");
    let out = maft(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(root)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("mAP50:"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval.json")).unwrap()).unwrap();
    assert!(json.get("map").is_some());

    let out = maft(&["diagnose", "--kind", "recall_curve", "--checkpoint", s(&run), "--data", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1\t") && rows[2].starts_with("2\t"));

    let out = maft(&["diagnose", "--kind", "matching_trace", "--run", s(&run), "--query", "0", "--out", s(root)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = std::fs::read_to_string(root.join("matching_trace_q0.tsv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iter\tx\ty\tz"));
    let out = maft(&["diagnose", "--kind", "matching_trace", "--run", s(&run), "--query", "99"]);
    assert_eq!(code(&out), 2);

    let out = maft(&["train", "--resume", s(&run.join("ckpt_e0001.bin")), "--data", s(&data), "--out", s(&root.join("again"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = std::fs::read(run.join("ckpt_e0002.bin")).unwrap();
    let b = std::fs::read(root.join("again").join("ckpt_e0002.bin")).unwrap();
    assert_eq!(a, b, "resumed run diverged");
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.txt");
    std::fs::write(&cfg, format!("{TINY}optim.lr = 1e300\noptim.weight_decay = 0\n")).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&maft(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "3"])), 0);
    let out = maft(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}
