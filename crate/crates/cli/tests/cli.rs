use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn amint(args: &[&str], data: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_amint"));
    cmd.args(args).env("RUST_LOG", "warn");
    match data {
        Some(d) => cmd.env("AMINT_DATA_DIR", d),
        None => cmd.env_remove("AMINT_DATA_DIR"),
    };
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn idx(path: &Path, magic: u32, dims: &[u32], body: &[u8]) {
    let mut bytes = magic.to_be_bytes().to_vec();
    for d in dims {
        bytes.extend(d.to_be_bytes());
    }
    bytes.extend(body);
    std::fs::write(path, bytes).unwrap();
}

/// A 28×28 MNIST-format dataset whose images brighten with their label.
fn tiny_mnist(dir: &Path, n_train: usize, n_test: usize) {
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let pixels: Vec<u8> = (0..n * 784).map(|p| (labels[p / 784] as usize * 20 + (p * 13) % 37) as u8).collect();
        idx(&dir.join(format!("{prefix}-images-idx3-ubyte")), 0x803, &[n as u32, 28, 28], &pixels);
        idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")), 0x801, &[n as u32], &labels);
    }
}

const TINY: &str = r#"
seed = 3
setup = "entry"

[dataset]
name = "mnist"

[backbone]
num_classes = 10
input_shape = { height = 28, width = 28, channels = 1 }
blocks = [
  { layers_per_block = 2, channels = 4 },
  { layers_per_block = 2, channels = 4 },
  { layers_per_block = 2, channels = 4 },
]

[mint_head]
per_path_conv_channels = [4]
dropout = 0.4
hidden_dim = 8

[train]
learning_rate = 0.001
max_epochs = 2
early_stop_patience = 1
batch_size = 16
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn odd_batch_size_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("batch_size = 16", "batch_size = 15"));
    let out = amint(&["train-active", "--config", arg(&cfg), "--out", arg(&tmp.path().join("o"))], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("max_epochs", "max_epoch"));
    let out = amint(&["train-passive", "--config", arg(&cfg), "--out", arg(&tmp.path().join("o"))], None);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = amint(&["train-active", "--config", arg(&cfg), "--out", arg(&tmp.path().join("o"))], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("train-images-idx3-ubyte"), "{}", stderr(&out));
}

#[test]
fn report_without_results_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amint(&["report", "--results", arg(tmp.path())], None);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn attack_stage_refuses_to_train_when_told_not_to() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 400, 50);
    let cfg = write_config(tmp.path(), &format!("auto_train_audited = false\n{TINY}"));
    let out = amint(&["run-mia", "--config", arg(&cfg), "--out", arg(&tmp.path().join("o"))], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("audited checkpoint"), "{}", stderr(&out));
}

#[test]
fn stages_are_deterministic_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 400, 50);
    let cfg = write_config(tmp.path(), TINY);
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|r| tmp.path().join(r)).collect();
    for run in &runs {
        for (cmd, dir) in [("train-active", "active"), ("train-passive", "passive"), ("run-mia", "mia")] {
            let out = amint(&[cmd, "--config", arg(&cfg), "--out", arg(&run.join(dir)), "--seed", "5"], Some(tmp.path()));
            assert_eq!(out.status.code(), Some(0), "{cmd}: {}", stderr(&out));
        }
        let out = amint(&["report", "--results", arg(run)], None);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in [
        "active/results.csv",
        "active/active_steps.csv",
        "passive/results.csv",
        "passive/passive_epochs.csv",
        "mia/results.csv",
        "report.txt",
        "report.csv",
    ] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    // `--seed` overrides the config seed.
    let manifest = std::fs::read_to_string(runs[0].join("mia/manifest.json")).unwrap();
    assert!(manifest.contains("\"master\": 5"), "{manifest}");
    let report = std::fs::read_to_string(runs[0].join("report.txt")).unwrap();
    assert!(report.contains("Table 2"), "{report}");
}

#[test]
fn reproduce_dry_run_lists_every_unit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amint(&["reproduce", "--scale", "desk", "--out", arg(tmp.path()), "--dry-run"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 30);
    assert_eq!(text.lines().filter(|l| l.starts_with("mia ")).count(), 6);
}

#[test]
fn bad_scale_is_a_usage_error() {
    let out = amint(&["reproduce", "--scale", "huge", "--out", "/nonexistent"], None);
    assert_eq!(out.status.code(), Some(2));
}
