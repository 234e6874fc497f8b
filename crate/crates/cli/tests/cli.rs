use std::path::Path;
use std::process::{Command, Output};

use effcnet::checkpoint::{save_checkpoint, CheckpointMeta};
use effcnet::data::{serialize_records, synthetic_two_class, DatasetKind, Record, Split};
use effcnet::image::Image;
use effcnet::{Model, NetworkConfig};

fn effcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effcnet")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ten-class CIFAR-10 files built from the two-class generator, relabelled round robin.
fn write_data(dir: &Path) {
    let base = synthetic_two_class(40, 8).records;
    let relabel = |offset: usize| -> Vec<Record> {
        base.iter().enumerate().map(|(i, r)| Record { label: ((i + offset) % 10) as u8, ..r.clone() }).collect()
    };
    for name in DatasetKind::Cifar10.files(Split::Train) {
        std::fs::write(dir.join(name), serialize_records(&relabel(0), DatasetKind::Cifar10)).unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), serialize_records(&relabel(3), DatasetKind::Cifar10)).unwrap();
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, "[network]\nstages = [1]\nbase_growth = 4\ninit_channels = 4\nnum_classes = 10\n").unwrap();
    path
}

fn zero_head_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = NetworkConfig { stages: vec![1], base_growth: 4, init_channels: 4, ..NetworkConfig::effcnet_cifar(10) };
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    model.zero_head();
    let path = dir.join("zero.ckpt");
    save_checkpoint(&model, &CheckpointMeta { dataset: "cifar10".into(), ..Default::default() }, &path).unwrap();
    path
}

#[test]
fn analyze_prints_totals_and_comparison() {
    let out = stdout(&effcnet(&[
        "analyze",
        "--config",
        s(&configs().join("effcnet_cifar10.toml")),
        "--baseline",
        s(&configs().join("condensenet_cifar10.toml")),
    ]));
    assert!(out.contains("462484"));
    assert!(out.contains("520202"));
    assert!(out.lines().any(|l| l.starts_with("params") && l.contains("0.889")));
}

#[test]
fn analyze_single_block_has_stem_block_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&effcnet(&["analyze", "--config", s(&small_config(dir.path())), "--csv"]));
    let names: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["stem", "stage0.block0", "head", "total"]);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    assert_eq!(effcnet(&["analyze", "--bogus"]).status.code(), Some(2));
    assert_eq!(effcnet(&[]).status.code(), Some(2));
    let missing = effcnet(&["analyze", "--config", "/nonexistent/config.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[network]\nbase_growth = 0\n").unwrap();
    let out = effcnet(&["analyze", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

fn probabilities(out: &str) -> Vec<(String, f64)> {
    out.lines()
        .filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            (parts[1].to_string(), parts[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn classify_zero_head_is_uniform_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let image = dir.path().join("img.ppm");
    std::fs::write(&image, synthetic_two_class(1, 2).records[0].image.to_ppm()).unwrap();
    let labels = configs().join("cifar10_labels.txt");
    let args = ["classify", "--ckpt", s(&ckpt), "--image", s(&image), "--labels", s(&labels)];
    let first = stdout(&effcnet(&args));
    let ranked = probabilities(&first);
    let names: Vec<&str> = ranked.iter().map(|(n, _)| n.as_str()).collect();
    let expected: Vec<String> = std::fs::read_to_string(&labels).unwrap().lines().map(String::from).collect();
    assert_eq!(names, expected);
    assert!(ranked.iter().all(|(_, p)| (p - 0.1).abs() < 1e-6));
    assert!(first.contains("forward") && first.contains(" ms"));
    assert_eq!(probabilities(&stdout(&effcnet(&args))), ranked);

    let raw = dir.path().join("img.bin");
    std::fs::write(&raw, synthetic_two_class(1, 2).records[0].image.bytes()).unwrap();
    let from_raw = stdout(&effcnet(&["classify", "--ckpt", s(&ckpt), "--image", s(&raw), "--labels", s(&labels), "--top", "3"]));
    assert_eq!(probabilities(&from_raw).len(), 3);
}

#[test]
fn classify_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let labels = configs().join("cifar10_labels.txt");
    let short = dir.path().join("short.bin");
    std::fs::write(&short, [0u8; 100]).unwrap();
    let out = effcnet(&["classify", "--ckpt", s(&ckpt), "--image", s(&short), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));

    let image = dir.path().join("img.ppm");
    std::fs::write(&image, Image::zeros().to_ppm()).unwrap();
    let few = dir.path().join("few.txt");
    std::fs::write(&few, "cat\ndog\n").unwrap();
    let out = effcnet(&["classify", "--ckpt", s(&ckpt), "--image", s(&image), "--labels", s(&few)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn train_then_eval_reproduces_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_data(&data);
    let run = dir.path().join("run");
    let out = stdout(&effcnet(&[
        "train",
        "--config",
        s(&small_config(dir.path())),
        "--data",
        s(&data),
        "--subset",
        "10",
        "--epochs",
        "1",
        "--out",
        s(&run),
    ]));
    let log = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(out.trim(), log.trim());
    for f in ["config.snapshot", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let logged_top1: f64 = log.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();

    let eval = stdout(&effcnet(&["eval", "--ckpt", s(&run.join("last.ckpt")), "--data", s(&data)]));
    let field = |name: &str| eval.lines().find_map(|l| l.strip_prefix(name)).unwrap().trim().to_string();
    assert_eq!(field("images "), "20");
    assert_eq!(field("top1 ").parse::<f64>().unwrap(), logged_top1);
}

#[test]
fn train_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_data(&data);
    let out = effcnet(&["train", "--config", s(&configs().join("toy.toml")), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn augment_preview_writes_requested_copies() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.ppm");
    let img = synthetic_two_class(1, 5).records[0].image.clone();
    std::fs::write(&image, img.to_ppm()).unwrap();
    let out = dir.path().join("preview");
    let args = |seed: &str| {
        effcnet(&[
            "augment-preview",
            "--image",
            s(&image),
            "--policy",
            s(&configs().join("cifar10_policy.txt")),
            "--count",
            "6",
            "--out",
            s(&out),
            "--seed",
            seed,
        ])
    };
    stdout(&args("1"));
    let files: Vec<Vec<u8>> = (0..6).map(|i| std::fs::read(out.join(format!("preview_{i:03}.ppm"))).unwrap()).collect();
    for f in &files {
        assert_eq!(Image::from_ppm(f).unwrap().bytes().len(), 3072);
    }
    stdout(&args("1"));
    let again: Vec<Vec<u8>> = (0..6).map(|i| std::fs::read(out.join(format!("preview_{i:03}.ppm"))).unwrap()).collect();
    assert_eq!(files, again);
}
