use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[train]
epochs = 1
batch_size = 16

[stream]
frames = 40
replay_len = 20

[online]
segment = 20

[data]
train_examples = 48
test_examples = 32
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybrep"));
    c.env_remove("HYBRIDNET_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn table1_cost_hybrid_column_is_sum() {
    let cfg = repo_file("configs/table1.toml");
    let out = run(&["cost", cfg.to_str().unwrap(), "--format", "tsv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "name\tLayerRatio\tRC_prune\tRC_quant\tRC_hybrid");
    let mut both = 0;
    for line in lines.filter(|l| !l.starts_with("RC_total")) {
        let f: Vec<&str> = line.split('\t').collect();
        if f[2] == "-" || f[3] == "-" {
            continue;
        }
        let (p, q, h): (f64, f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap());
        // two-decimal rounding of three numbers
        assert!((h - p - q).abs() <= 0.0100001, "{line}");
        both += 1;
    }
    assert_eq!(both, 3);
}

#[test]
fn cost_markdown_renders_table() {
    let cfg = repo_file("configs/table1.toml");
    let out = run(&["cost", cfg.to_str().unwrap(), "--format", "markdown"]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("| name | LayerRatio |"));
}

#[test]
fn malformed_config_exits_1_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[train]\nepochs = 2\nbogus_key = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["train", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn missing_config_exits_1() {
    let out = run(&["train", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = run(&["cost", "x.toml", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_seed_env_is_a_config_error() {
    let out = bin().env("HYBRIDNET_SEED", "abc").arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("junk.ckpt");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let cfg = write_tiny(dir.path());
    let out = run(&["eval", ck.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn train_stream_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run(&["--seed", "11", "train", cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // same config and seed: identical bytes
    for f in ["hybrid.ckpt", "quant_only.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // the environment seed is used when no flag is given
    let c = dir.path().join("c");
    let out = bin()
        .env("HYBRIDNET_SEED", "11")
        .args(["train", cfg, "--out", c.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("hybrid.ckpt")).unwrap(), fs::read(c.join("hybrid.ckpt")).unwrap());

    let hybrid = a.join("hybrid.ckpt");
    let reference = a.join("quant_only.ckpt");
    let out = run(&[
        "stream",
        cfg,
        "--checkpoint",
        hybrid.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("0\t20\t"));

    let out = run(&["stream", cfg, "--checkpoint", reference.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", hybrid.to_str().unwrap(), cfg]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).lines().nth(1).unwrap().starts_with("32\t"));

    // one all-zero image per row
    let csv = dir.path().join("data.csv");
    let row = format!("0{}\n", ",0".repeat(32 * 32));
    fs::write(&csv, row.repeat(3)).unwrap();
    let out = run(&["eval", hybrid.to_str().unwrap(), csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().nth(1).unwrap().starts_with("3\t"));

    let out = run(&["cost", cfg, "--checkpoint", hybrid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY}\n[output]\ndir = {:?}\n", out_dir.to_str().unwrap())).unwrap();
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert!(out_dir.join("hybrid.ckpt").exists());
}
