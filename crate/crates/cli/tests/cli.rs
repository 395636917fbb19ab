//! End-to-end tests of the `vardfs` binary: exit codes, file outputs,
//! determinism, and format contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vardfs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vardfs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn synthetic_spec(dir: &Path, out: &str) -> PathBuf {
    let spec = format!(
        r#"
[dataset]
kind = "synthetic-oracle"
classes = 3
features = 5
train_instances = 80
test_instances = 40

[model]
arch = "deepsets"
hidden_dim = 16
num_blocks = 1
pooling = "attention-pool"

[train]
budget = 2
epochs = 2
batch_size = 16
learning_rate = 1e-3
seed = 11
temperature_start = 1.0
temperature_end = 0.3

[output]
dir = "{out}"
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, spec).unwrap();
    path
}

fn write_tiny_idx(dir: &Path) -> (PathBuf, PathBuf) {
    // 12 images of 6x6 with a bright center so the heatmap has structure
    let (n, h, w) = (12u32, 6u32, 6u32);
    let mut img = Vec::new();
    img.extend(0x0803u32.to_be_bytes());
    img.extend(n.to_be_bytes());
    img.extend(h.to_be_bytes());
    img.extend(w.to_be_bytes());
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                let center = (2..4).contains(&r) && (2..4).contains(&c);
                img.push(if center { 200 + (i % 50) as u8 } else { (i * 3) as u8 });
            }
        }
    }
    let mut lbl = Vec::new();
    lbl.extend(0x0801u32.to_be_bytes());
    lbl.extend(n.to_be_bytes());
    lbl.extend((0..n).map(|i| (i % 10) as u8));
    let ip = dir.join("imgs.idx");
    let lp = dir.join("lbls.idx");
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lbl).unwrap();
    (ip, lp)
}

fn image_spec(dir: &Path, out: &str) -> PathBuf {
    let (ip, lp) = write_tiny_idx(dir);
    let spec = format!(
        r#"
[dataset]
kind = "image-idx"
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
sample_count = 9

[model]
arch = "deepsets"
hidden_dim = 12
num_blocks = 1
pooling = "masked-mean"

[train]
budget = 2
epochs = 1
batch_size = 6
learning_rate = 1e-3
seed = 3
temperature_start = 1.0
temperature_end = 1.0

[output]
dir = "{out}"
"#,
        ip.display(),
        lp.display(),
        ip.display(),
        lp.display()
    );
    let path = dir.join("img.toml");
    std::fs::write(&path, spec).unwrap();
    path
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic_spec(dir.path(), "out");
    let out = vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let outdir = dir.path().join("out");
    assert!(outdir.join("checkpoint.bin").exists());
    assert!(outdir.join("summary.json").exists());
    let loss1 = std::fs::read_to_string(outdir.join("loss.csv")).unwrap();
    assert!(loss1.starts_with("epoch,mean_loss\n"));
    assert_eq!(loss1.lines().count(), 3, "header + one row per epoch");

    // identical rerun
    let out = vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let loss2 = std::fs::read_to_string(outdir.join("loss.csv")).unwrap();
    assert_eq!(loss1, loss2, "same spec + seed must reproduce the loss CSV exactly");

    // losses parse as locale-independent floats
    for line in loss1.lines().skip(1) {
        let (_, v) = line.split_once(',').unwrap();
        v.parse::<f64>().unwrap();
    }
}

#[test]
fn eval_writes_accuracy_rows_and_baseline_column() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic_spec(dir.path(), "out");
    assert!(vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path()).status.success());
    let ckpt = dir.path().join("out/checkpoint.bin");
    let out = vardfs(
        &["eval", "--spec", spec.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--budgets", "1,2"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/accuracy.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "budget,accuracy,n");
    assert_eq!(lines.count(), 2, "one row per budget");

    let out = vardfs(
        &[
            "eval",
            "--spec",
            spec.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--budgets",
            "1,2",
            "--with-random-baseline",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("out/accuracy.csv")).unwrap();
    assert!(csv.starts_with("budget,accuracy,n,random_accuracy\n"));
}

#[test]
fn missing_path_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    std::fs::write(
        &spec,
        r#"
[dataset]
kind = "image-idx"
train_images = "/nonexistent/images"
train_labels = "/nonexistent/labels"
test_images = "/nonexistent/images"
test_labels = "/nonexistent/labels"
sample_count = 5

[model]
arch = "deepsets"
hidden_dim = 8
num_blocks = 1
pooling = "masked-mean"

[train]
budget = 1
epochs = 1
batch_size = 4
learning_rate = 1e-3
seed = 1
temperature_start = 1.0
temperature_end = 1.0

[output]
dir = "out"
"#,
    )
    .unwrap();
    let out = vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train_images"), "error must name the field: {stderr}");
}

#[test]
fn heatmap_requires_image_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic_spec(dir.path(), "out");
    assert!(vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path()).status.success());
    let ckpt = dir.path().join("out/checkpoint.bin");
    let out = vardfs(
        &["heatmap", "--spec", spec.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--budget", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn heatmap_grid_and_pgm_formats() {
    let dir = tempfile::tempdir().unwrap();
    let spec = image_spec(dir.path(), "imgout");
    let out = vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("imgout/checkpoint.bin");
    let out = vardfs(
        &["heatmap", "--spec", spec.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--budget", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let grid = std::fs::read_to_string(dir.path().join("imgout/frequency_grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows.len(), 6);
    let total: u64 = rows
        .iter()
        .flat_map(|r| r.split(',').map(|v| v.parse::<u64>().unwrap()))
        .sum();
    assert_eq!(total, 12 * 2, "counts sum to n_instances × budget");

    let pgm = std::fs::read(dir.path().join("imgout/frequency.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n6 6\n255\n"));
    assert_eq!(pgm.len(), "P5\n6 6\n255\n".len() + 36);
}

#[test]
fn oracle_check_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic_spec(dir.path(), "oc");
    let out = vardfs(&["oracle-check", "--spec", spec.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("agreement with exact-CMI oracle"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("oc/oracle_summary.json")).unwrap())
            .unwrap();
    let rates = summary["agreement"].as_array().unwrap();
    assert_eq!(rates.len(), 2);
    for r in rates {
        let v = r.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn checkpoint_dataset_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic_spec(dir.path(), "out");
    assert!(vardfs(&["train", "--spec", spec.to_str().unwrap()], dir.path()).status.success());
    // different descriptor dimension: image dataset (c=2 matches synthetic, so
    // change classes instead via a second synthetic spec)
    let spec2 = dir.path().join("run2.toml");
    let text = std::fs::read_to_string(dir.path().join("run.toml"))
        .unwrap()
        .replace("classes = 3", "classes = 4");
    std::fs::write(&spec2, text).unwrap();
    let ckpt = dir.path().join("out/checkpoint.bin");
    let out = vardfs(
        &["eval", "--spec", spec2.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--budgets", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
