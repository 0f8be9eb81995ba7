use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const TINY: &str = "\
[run]
seed = 3
[benchmark]
seeds = 4
samples = 8
probe_filters = 4
[schedule]
num_steps = 10
[broad]
count = 60
[adapt]
count = 30
[pretrained]
width = 8
blocks = 1
steps = 5
batch_size = 4
[adapter]
width = 8
blocks = 1
steps = 5
batch_size = 4
";

/// A scratch working directory holding the config; commands run with it
/// as their current directory.
struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vadapter"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn top_level(&self) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(self.dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        names
    }
}

/// `[artifacts]` of a manifest.
fn artifacts(manifest: &Path) -> BTreeMap<String, String> {
    let text = fs::read_to_string(manifest).unwrap();
    let mut out = BTreeMap::new();
    let mut inside = false;
    for line in text.lines() {
        if line.starts_with('[') {
            inside = line == "[artifacts]";
        } else if inside {
            if let Some((k, v)) = line.split_once('=') {
                out.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    out
}

fn train_both(s: &Sandbox) {
    s.ok(&["--config", "run.cfg", "--out-dir", "data", "gen-data"]);
    s.ok(&[
        "--config",
        "run.cfg",
        "--out-dir",
        "models",
        "train",
        "--role",
        "adapter",
        "--data",
        "data/adapt_train.vads",
    ]);
    s.ok(&[
        "--config",
        "run.cfg",
        "--out-dir",
        "models",
        "train",
        "--role",
        "pretrained",
        "--data",
        "data/pretrain.vads",
    ]);
}

#[test]
fn gen_data_reruns_from_its_manifest() {
    let s = Sandbox::new();
    s.ok(&["--config", "run.cfg", "--out-dir", "a", "gen-data"]);
    for f in ["pretrain.vads", "adapt_train.vads", "adapt_test.vads", "manifest.txt"] {
        assert!(s.path("a").join(f).exists(), "{f} missing");
    }
    let first = artifacts(&s.path("a/manifest.txt"));
    assert_eq!(first.len(), 3);
    s.ok(&["--config", "a/manifest.txt", "--out-dir", "b", "gen-data"]);
    assert_eq!(artifacts(&s.path("b/manifest.txt")), first);
    // a different root seed changes the derived corpus seeds
    s.ok(&["--config", "run.cfg", "--out-dir", "c", "--seed", "4", "gen-data"]);
    assert_ne!(artifacts(&s.path("c/manifest.txt")), first);
    assert_eq!(s.top_level(), ["a", "b", "c", "run.cfg"]);
}

#[test]
fn zero_prior_composition_equals_plain_sampling() {
    let s = Sandbox::new();
    train_both(&s);
    s.ok(&[
        "--config",
        "run.cfg",
        "--out-dir",
        "plain",
        "sample",
        "--model",
        "models/adapter.vadp",
    ]);
    s.ok(&[
        "--config",
        "run.cfg",
        "--out-dir",
        "zero",
        "adapt-sample",
        "--adapter",
        "models/adapter.vadp",
        "--pretrained",
        "models/pretrained.vadp",
        "--gamma",
        "0",
        "--cutoff",
        "0",
    ]);
    s.ok(&[
        "--config",
        "run.cfg",
        "--out-dir",
        "composed",
        "adapt-sample",
        "--adapter",
        "models/adapter.vadp",
        "--pretrained",
        "models/pretrained.vadp",
        "--gamma",
        "0.5",
    ]);
    let plain = artifacts(&s.path("plain/manifest.txt"));
    assert_eq!(plain, artifacts(&s.path("zero/manifest.txt")));
    assert_ne!(plain, artifacts(&s.path("composed/manifest.txt")));
    // the flag values are echoed into the manifest
    let echo = fs::read_to_string(s.path("composed/manifest.txt")).unwrap();
    assert!(echo.contains("gamma = 0.5"), "{echo}");
    assert!(echo.contains("adapter_sha256 = "));
}

#[test]
fn remote_prior_matches_local_prior() {
    let s = Sandbox::new();
    train_both(&s);
    let mut server = Command::new(env!("CARGO_BIN_EXE_vadapter"))
        .args([
            "serve",
            "--addr",
            "127.0.0.1:0",
            "--model",
            "prior=models/pretrained.vadp",
        ])
        .current_dir(s.dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    let remote = format!("{addr}/prior");
    let base = [
        "--config",
        "run.cfg",
        "adapt-sample",
        "--adapter",
        "models/adapter.vadp",
        "--mcmc-steps",
        "1",
    ];
    let mut local_args = vec!["--out-dir", "local"];
    local_args.extend(base);
    local_args.extend(["--pretrained", "models/pretrained.vadp"]);
    let mut remote_args = vec!["--out-dir", "remote"];
    remote_args.extend(base);
    remote_args.extend(["--remote", remote.as_str()]);
    s.ok(&local_args);
    let remote_out = s.run(&remote_args);
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(
        remote_out.status.success(),
        "{}",
        String::from_utf8_lossy(&remote_out.stderr)
    );
    assert_eq!(
        artifacts(&s.path("local/manifest.txt")),
        artifacts(&s.path("remote/manifest.txt"))
    );
}

#[test]
fn eval_reports_exactly_the_planned_rows() {
    let s = Sandbox::new();
    let cfg = TINY.replace("[benchmark]\n", "[benchmark]\nrows = adapter-only, video-adapter\n");
    fs::write(s.path("run.cfg"), cfg).unwrap();
    s.ok(&["--config", "run.cfg", "--out-dir", "ev", "eval"]);
    let table = fs::read_to_string(s.path("ev/report.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["adapter-only", "video-adapter"]);
    assert!(fs::read_to_string(s.path("ev/report.txt"))
        .unwrap()
        .contains("probe sha256"));
}

#[test]
fn bad_invocations_fail_with_a_diagnostic() {
    let s = Sandbox::new();
    assert!(!s.run(&["frobnicate"]).status.success());
    fs::write(s.path("bad.cfg"), "[run]\nseed = 1\nwhat = 2\n").unwrap();
    let out = s.run(&["--config", "bad.cfg", "gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("what") && err.contains("line 3"), "{err}");
    let out = s.run(&["--config", "run.cfg", "sample", "--model", "missing.vadp"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.vadp"));
}

#[test]
fn oracle_check_passes_every_loop() {
    let s = Sandbox::new();
    let out = s.ok(&["oracle-check"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
    assert_eq!(s.top_level(), ["run.cfg"]);
}
