use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_panosfuda"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    let o = bin().args(args).arg("--out").arg(out).output().unwrap();
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o
}

fn small_data(dir: &Path) {
    let o = run(
        &[
            "gen-data",
            "--seed",
            "1",
            "--classes",
            "6",
            "--source-scenes",
            "8",
            "--crop",
            "16",
            "--target-train",
            "2",
            "--target-test",
            "1",
            "--target-h",
            "16",
            "--previews",
            "1",
        ],
        &dir.join("data"),
    );
    assert!(o.status.success());
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_data(root);
    let data = root.join("data");
    assert!(data.join("manifest.txt").exists());

    let o = run(&["pretrain", "--data", data.to_str().unwrap(), "--epochs", "1"], &root.join("src"));
    assert!(o.status.success());
    assert!(root.join("src/checkpoint/manifest.txt").exists());
    assert_eq!(fs::read_to_string(root.join("src/pretrain.jsonl")).unwrap().lines().count(), 1);

    let cfg = root.join("adapt.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\ntp_patch = 8\n").unwrap();
    let o = run(
        &[
            "adapt",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--source",
            root.join("src/checkpoint").to_str().unwrap(),
            "--dump-confidence",
            "--dump-attention",
        ],
        &root.join("adapt"),
    );
    assert!(o.status.success());
    let log = fs::read_to_string(root.join("adapt/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seed"], 5);
        assert!(v["miou"].as_f64().is_some());
    }
    assert!(root.join("adapt/target/manifest.txt").exists());
    assert!(root.join("adapt/bank.ptns").exists());
    assert!(root.join("adapt/confidence/epoch_001.pgm").exists());

    let o = run(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--model",
            root.join("adapt/target").to_str().unwrap(),
        ],
        &root.join("eval"),
    );
    assert!(o.status.success());
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("eval/eval.json")).unwrap()).unwrap();
    let m = e["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));

    let o = run(
        &["eval", "--data", data.to_str().unwrap(), "--model", root.join("adapt/target").to_str().unwrap(), "--split", "nope"],
        &root.join("eval2"),
    );
    assert!(!o.status.success());
}

#[test]
fn adapt_is_reproducible_from_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_data(root);
    let data = root.join("data");
    assert!(run(&["pretrain", "--data", data.to_str().unwrap(), "--epochs", "1"], &root.join("src")).status.success());
    let go = |name: &str| {
        let o = run(
            &[
                "adapt",
                "--data",
                data.to_str().unwrap(),
                "--source",
                root.join("src/checkpoint").to_str().unwrap(),
                "--epochs",
                "1",
                "--tp-patch",
                "8",
            ],
            &root.join(name),
        );
        assert!(o.status.success());
    };
    go("a");
    go("b");
    for f in ["metrics.jsonl", "bank.ptns", "target/head.weight.ptns", "target/bns.running_var.ptns"] {
        assert_eq!(fs::read(root.join("a").join(f)).unwrap(), fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn project_reports_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["project", "--height", "32", "--tp-patch", "32"], tmp.path());
    assert!(o.status.success());
    let o = run(&["project", "--height", "31", "--ffp-fov-deg", "90"], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn gradcheck_small_run_passes() {
    let o = bin()
        .args(["gradcheck", "--seeds", "2", "--objective-seeds", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("conv2d"));
    assert!(!text.contains("FAILED"));
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = run(
        &["adapt", "--config", cfg.to_str().unwrap(), "--data", "x", "--source", "y"],
        tmp.path(),
    );
    assert!(!o.status.success());
    assert!(!bin().arg("not-a-command").status().unwrap().success());
}

#[test]
fn gamma_sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "ablate-gamma",
            "--seeds",
            "1",
            "--values",
            "0,0.1",
            "--target-h",
            "32",
            "--epochs",
            "1",
            "--tp-patch",
            "16",
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let text = fs::read_to_string(tmp.path().join("ablate_gamma.txt")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ablate_gamma.json")).unwrap()).unwrap();
    assert_eq!(j["entries"].as_array().unwrap().len(), 2);
    assert_eq!(j["seeds"][0], 0);
}
