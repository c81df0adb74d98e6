//! Exit codes and seeded reproducibility of the binary.

use std::path::Path;
use std::process::{Command, Output};

fn sparselora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparselora"))
        .args(args)
        .output()
        .expect("spawn sparselora")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparselora(&["flops", "--preset", "no-such-model"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let plan = dir.path().join("bad.plan");
    std::fs::write(&plan, "token_split = sometimes\n").unwrap();
    assert!(!sparselora(&["flops", "--plan", p(&plan)]).status.success());

    let missing = dir.path().join("missing.slra");
    assert!(!sparselora(&["decompose", "--checkpoint", p(&missing), "--out", p(&plan)]).status.success());
    assert!(!sparselora(&["flops", "--dense-warmup", "150"]).status.success());
}

#[test]
fn flops_reports_estimator_share() {
    let out = sparselora(&["flops", "--preset", "llama2-7b", "--paper-plan"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("estimator_pct"));
}

/// Data, a base checkpoint and a short sparse fine-tune; returns the metrics
/// log and adapter bytes.
fn tiny_run(dir: &Path, seed: &str) -> (Vec<u8>, Vec<u8>) {
    let data = dir.join("train.jsonl");
    let ckpt = dir.join("base.slra");
    let metrics = dir.join("metrics.txt");
    let adapters = dir.join("adapters.slra");
    let ok = |args: &[&str]| {
        let out = sparselora(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["--seed", seed, "gen-data", "--task", "shift", "--n", "32", "--out", p(&data)]);
    ok(&["--seed", seed, "pretrain", "--model", "tiny", "--steps", "4", "--batch", "4", "--out", p(&ckpt)]);
    ok(&[
        "--seed", seed, "train", "--checkpoint", p(&ckpt), "--data", p(&data), "--steps", "6", "--batch", "4",
        "--seq-len", "16", "--rank", "2", "--token-split", "random", "--metrics", p(&metrics), "--out",
        p(&adapters),
    ]);
    (std::fs::read(metrics).unwrap(), std::fs::read(adapters).unwrap())
}

#[test]
fn seeded_runs_are_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = tiny_run(a.path(), "7");
    let second = tiny_run(b.path(), "7");
    assert!(!first.0.is_empty());
    assert_eq!(first, second);
}
