use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agr_lab::config::Config;
use agr_lab::manifest::RunManifest;

fn agr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agr")).args(["--config", dir.join("run.toml").to_str().unwrap()]).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn check(out: &Output, code: i32) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(out.status.code(), Some(code), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn manifest(dir: &Path, sub: &str) -> RunManifest {
    let m = RunManifest::load(&dir.join(format!("run/manifest_{sub}.json"))).unwrap();
    for a in &m.outputs {
        assert!(a.path.exists(), "{sub}: missing {}", a.path.display());
    }
    m
}

#[test]
fn full_pipeline_on_a_small_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(200);
    fs::write(dir.join("corpus.txt"), text).unwrap();
    fs::write(
        dir.join("run.toml"),
        format!(
            r#"
[run]
out = "{out}"
[data]
inputs = ["{corpus}"]
[model]
n_layer = 1
n_head = 2
emb_dim = 16
block_size = 16
[train]
max_iters = 20
warmup_iters = 4
eval_interval = 10
eval_batches = 2
batch_size = 8
[eval]
samples = 100
runs = 2
grid = [[1, 0.05], [4, 0.05]]
[oracle]
op = "sweep"
vocab = 3
t = 3
k = 2
"#,
            out = dir.join("run").display(),
            corpus = dir.join("corpus.txt").display()
        ),
    )
    .unwrap();

    check(&agr(dir, &["prepare"]), 0);
    assert!(dir.join("run/dataset.bin").exists());
    check(&agr(dir, &["train", "--model", "both"]), 0);
    let m = manifest(dir, "train");
    assert!(m.seeds.len() >= 2);

    let table = check(&agr(dir, &["eval", "--runs", "3"]), 0);
    assert!(!table.is_empty());
    let m = manifest(dir, "eval");
    assert_eq!(m.overrides, ["eval.runs=3"]);
    // the recorded config reproduces the run, override included
    let snap = Config::from_toml(&m.config).unwrap();
    assert_eq!(snap.eval.runs, 3);
    for f in ["eval_table.txt", "eval_summary.csv", "eval_runs.csv", "eval_diagnostics.csv", "eval_report.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }

    check(&agr(dir, &["agr", "--traces", "--k", "3"]), 0);
    let traces = fs::read_to_string(dir.join("run/agr_traces.csv")).unwrap();
    assert!(traces.lines().count() > 100);
    manifest(dir, "agr");

    check(&agr(dir, &["oracle"]), 0);
    let sweep = fs::read_to_string(dir.join("run/oracle_sweep.csv")).unwrap();
    assert!(sweep.lines().count() > 1);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "[train]\nmax_iter = 5\n").unwrap();
    let out = agr(tmp.path(), &["selftest"]);
    check(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.max_iter"));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "").unwrap();
    let out = check(&agr(tmp.path(), &["selftest"]), 0);
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}
