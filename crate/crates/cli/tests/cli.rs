//! End-to-end tests of the `rmt` binary. Each test gets its own scratch
//! directory; small geometries keep the whole file in the seconds range.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rmt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rmt"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rmt_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny but non-degenerate geometry for fast pipelines.
fn gen_small(dir: &Path, seed: u64, split: bool) {
    let mut cmd = rmt();
    cmd.args([
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--classes",
        "4",
        "--base-classes",
        "8",
        "--shots",
        "4",
        "--dim",
        "16",
        "--tokens",
        "4",
        "--rotation-planes",
        "2",
        "--nuisance-dims",
        "4",
        "--base-train-per-class",
        "8",
        "--base-test-per-class",
        "2",
        "--test-per-class",
        "5",
    ]);
    if split {
        cmd.arg("--split");
    }
    ok(&cmd.output().unwrap());
}

fn pretrain_small(task: &Path, out: &Path) {
    let out_cmd = rmt()
        .args([
            "pretrain",
            "--task",
            task.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "5",
            "--blocks",
            "1",
            "--heads",
            "4",
        ])
        .output()
        .unwrap();
    ok(&out_cmd);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn gen_is_deterministic() {
    let root = scratch("gen_det");
    let a = root.join("a");
    let b = root.join("b");
    gen_small(&a, 7, false);
    gen_small(&b, 7, false);
    for f in ["base_train.rmtf", "base_test.rmtf", "down_train.rmtf", "down_test.rmtf", "task.manifest"]
    {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between identical gens");
    }
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn gen_without_seed_is_usage_error() {
    let root = scratch("gen_noseed");
    let out = rmt()
        .args(["gen", "--out", root.to_str().unwrap(), "--classes", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task.seed"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn unknown_option_and_unknown_key_are_usage_errors() {
    let out = rmt().args(["gen", "--seed", "1", "--bogus", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = rmt()
        .args(["gen", "--seed", "1", "--set", "task.bogus=3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn manifest_reflects_requested_classes() {
    let root = scratch("manifest");
    gen_small(&root, 3, false);
    let manifest = std::fs::read_to_string(root.join("task.manifest")).unwrap();
    assert!(manifest.contains("task.classes = 4"), "{manifest}");
    assert!(manifest.contains("task.seed = 3"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn full_pipeline_with_leak_equivalence_and_eval() {
    let root = scratch("pipeline");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 1, false);
    pretrain_small(&task, &model_dir);
    let ckpt = model_dir.join("checkpoint.rmtw");

    // plain tune vs tune with an inert --leak 0: byte-identical artifacts
    let tune = |out: &Path, extra: &[&str]| {
        let mut cmd = rmt();
        cmd.args([
            "tune",
            "--model",
            ckpt.to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--policy",
            "amt",
            "--epochs",
            "3",
            "--seed",
            "5",
        ]);
        cmd.args(extra);
        ok(&cmd.output().unwrap());
    };
    let t_plain = root.join("plain");
    let t_leak0 = root.join("leak0");
    tune(&t_plain, &[]);
    tune(&t_leak0, &["--leak", "0"]);
    assert_eq!(
        read(&t_plain.join("masks.rmtm")),
        read(&t_leak0.join("masks.rmtm")),
        "an inert leak value changed the artifact"
    );

    // eval with the artifact reproduces the tune-time final accuracy
    let eval_dir = root.join("eval");
    let out = rmt()
        .args([
            "eval",
            "--model",
            ckpt.to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--masks",
            t_plain.join("masks.rmtm").to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let record = std::fs::read_to_string(eval_dir.join("eval.record")).unwrap();
    let metrics = std::fs::read_to_string(t_plain.join("tune.metrics")).unwrap();
    let final_acc = metrics
        .lines()
        .find(|l| l.starts_with("summary"))
        .and_then(|l| {
            l.split_whitespace()
                .find(|t| t.starts_with("final_accuracy="))
                .map(|t| t.trim_start_matches("final_accuracy=").to_string())
        })
        .unwrap();
    assert!(
        record.contains(&format!("accuracy = {final_acc}")),
        "eval record {record} vs tuned final {final_acc}"
    );

    // zero-shot eval (no masks) matches the tune-time zero-shot record
    let zs_dir = root.join("zs");
    ok(&rmt()
        .args([
            "eval",
            "--model",
            ckpt.to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            zs_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    let zs_record = std::fs::read_to_string(zs_dir.join("eval.record")).unwrap();
    let zs = metrics
        .lines()
        .find(|l| l.starts_with("summary"))
        .and_then(|l| {
            l.split_whitespace()
                .find(|t| t.starts_with("zero_shot="))
                .map(|t| t.trim_start_matches("zero_shot=").to_string())
        })
        .unwrap();
    assert!(zs_record.contains(&format!("accuracy = {zs}")), "{zs_record} vs {zs}");

    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn tune_is_idempotent_and_echo_reusable() {
    let root = scratch("idem");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 2, false);
    pretrain_small(&task, &model_dir);
    let ckpt = model_dir.join("checkpoint.rmtw");
    let run = |out: &Path| {
        ok(&rmt()
            .args([
                "tune",
                "--model",
                ckpt.to_str().unwrap(),
                "--task",
                task.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--policy",
                "pmt",
                "--regularized",
                "--leak",
                "0.3",
                "--epochs",
                "2",
                "--seed",
                "9",
            ])
            .output()
            .unwrap());
    };
    let a = root.join("a");
    let b = root.join("b");
    run(&a);
    run(&b);
    assert_eq!(read(&a.join("masks.rmtm")), read(&b.join("masks.rmtm")));
    assert_eq!(read(&a.join("tune.metrics")), read(&b.join("tune.metrics")));
    // echoes differ only in their out directory
    let strip_out = |p: &Path| -> String {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip_out(&a.join("config.resolved")),
        strip_out(&b.join("config.resolved"))
    );

    // feeding the echo back as --config reproduces the run byte-identically
    let c = root.join("c");
    ok(&rmt()
        .args([
            "tune",
            "--config",
            a.join("config.resolved").to_str().unwrap(),
            "--out",
            c.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    assert_eq!(read(&a.join("masks.rmtm")), read(&c.join("masks.rmtm")));
    assert_eq!(read(&a.join("tune.metrics")), read(&c.join("tune.metrics")));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn analyze_iou_of_identical_artifacts_is_one() {
    let root = scratch("iou");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 4, false);
    pretrain_small(&task, &model_dir);
    let tune_dir = root.join("tune");
    ok(&rmt()
        .args([
            "tune",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            tune_dir.to_str().unwrap(),
            "--epochs",
            "2",
        ])
        .output()
        .unwrap());
    let masks = tune_dir.join("masks.rmtm");
    let out = rmt()
        .args([
            "analyze",
            "iou",
            "--a",
            masks.to_str().unwrap(),
            "--b",
            masks.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iou = 1.000"), "{stdout}");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn analyze_sparsity_matches_tune_metrics() {
    let root = scratch("sparsity");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 5, false);
    pretrain_small(&task, &model_dir);
    let tune_dir = root.join("tune");
    ok(&rmt()
        .args([
            "tune",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            tune_dir.to_str().unwrap(),
            "--epochs",
            "4",
            "--lr",
            "0.004",
        ])
        .output()
        .unwrap());
    let metrics = std::fs::read_to_string(tune_dir.join("tune.metrics")).unwrap();
    let final_sparsity = metrics
        .lines()
        .find(|l| l.starts_with("summary"))
        .and_then(|l| {
            l.split_whitespace()
                .find(|t| t.starts_with("final_sparsity="))
                .map(|t| t.trim_start_matches("final_sparsity=").to_string())
        })
        .unwrap();
    let out = rmt()
        .args([
            "analyze",
            "sparsity",
            "--masks",
            tune_dir.join("masks.rmtm").to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let record = std::fs::read_to_string(root.join("sparsity.record")).unwrap();
    let total = record
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().last().map(str::to_string))
        .unwrap();
    assert_eq!(total, final_sparsity, "analyze total vs tune-time report");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn analyze_delta_lists_group_means() {
    let root = scratch("delta");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 6, false);
    pretrain_small(&task, &model_dir);
    let out = rmt()
        .args([
            "analyze",
            "delta",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("group:mhsa"), "{stdout}");
    assert!(stdout.contains("group:mlp"), "{stdout}");
    let record = std::fs::read_to_string(root.join("delta.record")).unwrap();
    assert!(record.contains("block0.attn.wq mhsa"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn pack_unpack_round_trip() {
    let root = scratch("packrt");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 8, false);
    pretrain_small(&task, &model_dir);
    let tune_dir = root.join("tune");
    ok(&rmt()
        .args([
            "tune",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            tune_dir.to_str().unwrap(),
            "--epochs",
            "3",
            "--lr",
            "0.004",
        ])
        .output()
        .unwrap());
    let masks = tune_dir.join("masks.rmtm");
    let listing = root.join("masks.txt");
    ok(&rmt()
        .args([
            "unpack",
            "--masks",
            masks.to_str().unwrap(),
            "--out-file",
            listing.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    let repacked = root.join("repacked.rmtm");
    ok(&rmt()
        .args([
            "pack",
            "--in",
            listing.to_str().unwrap(),
            "--out-file",
            repacked.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    assert_eq!(read(&masks), read(&repacked), "pack(unpack(x)) must be byte-identical");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn base_new_split_flows_through_tune() {
    let root = scratch("split");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 9, true);
    pretrain_small(&task, &model_dir);
    let tune_dir = root.join("tune");
    let out = rmt()
        .args([
            "tune",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            tune_dir.to_str().unwrap(),
            "--regularized",
            "--leak",
            "1.0",
            "--epochs",
            "2",
        ])
        .output()
        .unwrap();
    ok(&out);
    let metrics = std::fs::read_to_string(tune_dir.join("tune.metrics")).unwrap();
    assert!(metrics.contains("base_to_new"), "{metrics}");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn diagnostics_dump_when_enabled() {
    let root = scratch("diag");
    let task = root.join("task");
    let model_dir = root.join("model");
    gen_small(&task, 10, false);
    pretrain_small(&task, &model_dir);
    let tune_dir = root.join("tune");
    ok(&rmt()
        .args([
            "tune",
            "--model",
            model_dir.join("checkpoint.rmtw").to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            tune_dir.to_str().unwrap(),
            "--regularized",
            "--leak",
            "0.3",
            "--epochs",
            "1",
            "--debug-diagnostics",
        ])
        .output()
        .unwrap());
    let diag = std::fs::read_to_string(tune_dir.join("tune.diagnostics")).unwrap();
    let mut lines = diag.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step layer mean_purity gate_rate mean_abs_g_ce mean_abs_g_kl"
    );
    assert!(lines.next().unwrap().starts_with("0 block0.attn.wq"), "{diag}");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let root = scratch("corrupt");
    let bad = root.join("bad.rmtw");
    std::fs::write(&bad, b"NOPE").unwrap();
    let task = root.join("task");
    gen_small(&task, 11, false);
    let out = rmt()
        .args([
            "eval",
            "--model",
            bad.to_str().unwrap(),
            "--task",
            task.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    std::fs::remove_dir_all(&root).ok();
}
