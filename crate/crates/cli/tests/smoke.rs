//! End-to-end runs of every subcommand on tiny inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
steps = 3
warmup_steps = 1
batch_size = 2
max_samples = 4000
seed = 1

[model.encoder]
conv_channels = 4
ctx_dim = 8
ctx_heads = 2
ffn_dim = 8
pos_conv_kernel = 3
pos_conv_groups = 2

[model.quantizer]
entries_per_codebook = 4
entry_dim = 3

[finetune]
steps = 3
target_steps = 2
warmup_steps = 1
batch_size = 2
"#;

fn mvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mvc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let corpus = root.join("corpus.toml");
        fs::write(&corpus, "num_utterances = 4\nduration_range = [0.4, 0.6]\ntokens_per_utt = [3, 5]\n").unwrap();
        let clean = root.join("clean");
        ok(&["gen-corpus", "--corpus-config", s(&corpus), "--out", s(&clean), "--seed", "3"]);
        let noisy = root.join("noisy");
        ok(&["gen-corpus", "--kind", "noisy", "--utterances", "3", "--out", s(&noisy), "--seed", "4"]);
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn pretrain(&self, out: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&[
            "pretrain",
            "--config",
            s(&self.config),
            "--source",
            s(&self.path("clean/manifest.jsonl")),
            "--out",
            s(&dir),
            "--seed",
            "7",
            "--metrics",
            s(&dir.with_extension("jsonl")),
        ]);
        dir.join("pretrain.ckpt")
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mvc(&[]).status.code(), Some(2));
    assert_eq!(mvc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mvc(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mvc(&["pretrain"]).status.code(), Some(2));
    assert_eq!(mvc(&["pretrain", "--source", "x", "--mvc-mode", "xy"]).status.code(), Some(2));
}

#[test]
fn failures_exit_1_with_class() {
    let out = mvc(&["evaluate", "--checkpoint", "/nonexistent.ckpt", "--test", "/nonexistent.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[io]"));
    let out = mvc(&["gradcheck", "--eps", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[argument]"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--eps", "1e-5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max rel. error"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with('{')).count(), 5);
}

#[test]
fn dsp_tools() {
    let f = Fixture::new();
    let clean = fs::read_dir(f.path("clean/audio")).unwrap().count();
    assert_eq!(clean, 4);
    let wav = f.path("clean/audio/clean-00000.wav");
    let out = f.path("aug");
    ok(&["augment", s(&wav), "--out", s(&out), "--seed", "5"]);
    assert!(out.join("clean-00000_aug.wav").exists());
    let sidecar = fs::read_to_string(out.join("augment.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(sidecar.lines().next().unwrap()).unwrap();
    assert_eq!(v["channels"].as_array().unwrap().len(), 1);

    let multi = f.path("noisy/audio/noisy-00000.wav");
    let out = f.path("bf");
    ok(&["beamform", s(&multi), "--out", s(&out)]);
    assert!(out.join("noisy-00000_bf.wav").exists());
    let lags = fs::read_to_string(out.join("beamform.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(lags.trim()).unwrap();
    assert_eq!(v["lags"].as_array().unwrap().len(), 4);

    let out = mvc(&["beamform", s(&wav), "--out", s(&f.path("bf2"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_pipeline() {
    let f = Fixture::new();
    let a = f.pretrain("run_a");
    let b = f.pretrain("run_b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(f.path("run_a.jsonl")).unwrap(),
        fs::read(f.path("run_b.jsonl")).unwrap()
    );
    let steps = fs::read_to_string(f.path("run_a.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 3);

    let clean = f.path("clean/manifest.jsonl");
    let noisy = f.path("noisy/manifest.jsonl");
    let cfg = f.config.clone();
    let out = f.path("cont");
    ok(&[
        "continue", "--config", s(&cfg), "--checkpoint", s(&a), "--source", s(&clean), "--target", s(&noisy),
        "--replay-rate", "3:4", "--steps", "2", "--mvc-mode", "da+mc", "--out", s(&out),
    ]);
    let cont = out.join("continual.ckpt");
    assert!(cont.exists());

    let out = f.path("ft");
    let run = ok(&["finetune", "--config", s(&cfg), "--checkpoint", s(&cont), "--labeled", s(&clean), "--out", s(&out)]);
    assert_eq!(String::from_utf8_lossy(&run.stdout).lines().count(), 3);
    let tuned = out.join("finetune.ckpt");

    let out = f.path("tr");
    let run = ok(&[
        "transfer", "--config", s(&cfg), "--checkpoint", s(&a), "--source", s(&clean), "--target", s(&noisy),
        "--steps", "2", "--out", s(&out),
    ]);
    assert_eq!(String::from_utf8_lossy(&run.stdout).lines().count(), 4);
    assert!(out.join("transfer.ckpt").exists());

    let run = ok(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&tuned), "--test", s(&clean)]);
    let v: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(v["type"], "eval");
    assert_eq!(v["utterances"], 4);
    assert!(v["token_error_rate"].is_number());

    for (data, kind) in [(&clean, "augmented"), (&noisy, "channels")] {
        let run = ok(&["consistency", "--checkpoint", s(&a), "--data", s(data), "--pairs", kind]);
        let v: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
        assert_eq!(v["type"], "consistency");
        let c = v["value"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }
}
