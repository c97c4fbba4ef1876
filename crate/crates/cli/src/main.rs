//! Command-line driver: gen, pretrain, tune, eval, analyze, pack, unpack.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::process::ExitCode;

use config::CliConfig;
use rmt_core::{Error, Result};

const USAGE: &str = "\
usage: rmt <command> [options]

commands:
  gen        generate a synthetic base + downstream task directory
  pretrain   train the frozen surrogate encoder on a base task
  tune       learn binary masks on a downstream task
  eval       evaluate a checkpoint (optionally with a mask artifact)
  analyze    delta | sparsity | iou
  pack       mask text listing -> artifact file
  unpack     artifact file -> mask text listing

common options:
  --config FILE     key = value config file (flags override it)
  --out DIR         output directory (default $RMT_OUT_ROOT or .)
  --set KEY=VALUE   set any config key directly

gen:      --seed N (required) --classes N --shots N --split ...
pretrain: --task DIR (required) --seed N --epochs N --lr X ...
tune:     --model FILE --task DIR --policy amt|mmt|pmt|dmt [--regularized]
          [--leak X] [--epochs N] [--lr X] [--seed N] [--optimizer adam|sgd]
          [--schedule cosine|constant] [--granularity parameter|input-channel|output-channel]
          [--alpha X] [--mask-init X] [--debug-diagnostics]
eval:     --model FILE --task DIR [--masks FILE]
analyze:  delta --model FILE --task DIR | sparsity --masks FILE | iou --a FILE --b FILE
pack:     --in LISTING --out-file ARTIFACT
unpack:   --masks ARTIFACT [--out-file LISTING]
";

/// Flag table per command: (flag, config key, takes a value).
fn flag_map(command: &str) -> Vec<(&'static str, &'static str, bool)> {
    match command {
        "gen" => vec![
            ("--seed", "task.seed", true),
            ("--classes", "task.classes", true),
            ("--base-classes", "task.base_classes", true),
            ("--shots", "task.shots", true),
            ("--dim", "task.dim", true),
            ("--tokens", "task.tokens", true),
            ("--sigma-pre", "task.sigma_pre", true),
            ("--sigma-shift", "task.sigma_shift", true),
            ("--rotation-angle", "task.rotation_angle", true),
            ("--rotation-planes", "task.rotation_planes", true),
            ("--nuisance-dims", "task.nuisance_dims", true),
            ("--base-train-per-class", "task.base_train_per_class", true),
            ("--base-test-per-class", "task.base_test_per_class", true),
            ("--test-per-class", "task.test_per_class", true),
            ("--split", "task.split", false),
        ],
        "pretrain" => vec![
            ("--task", "pretrain.task", true),
            ("--seed", "pretrain.seed", true),
            ("--epochs", "pretrain.epochs", true),
            ("--lr", "pretrain.lr", true),
            ("--batch", "pretrain.batch", true),
            ("--tau-init", "pretrain.tau_init", true),
            ("--blocks", "pretrain.blocks", true),
            ("--heads", "pretrain.heads", true),
            ("--mlp-expansion", "pretrain.mlp_expansion", true),
        ],
        "tune" | "analyze-delta" => vec![
            ("--model", "tune.model", true),
            ("--task", "tune.task", true),
            ("--policy", "tune.policy", true),
            ("--regularized", "tune.regularized", false),
            ("--leak", "tune.leak", true),
            ("--alpha", "tune.alpha", true),
            ("--mask-init", "tune.mask_init", true),
            ("--lr", "tune.lr", true),
            ("--epochs", "tune.epochs", true),
            ("--batch", "tune.batch", true),
            ("--optimizer", "tune.optimizer", true),
            ("--schedule", "tune.schedule", true),
            ("--seed", "tune.seed", true),
            ("--granularity", "tune.granularity", true),
            ("--debug-diagnostics", "tune.diagnostics", false),
        ],
        "eval" => vec![
            ("--model", "eval.model", true),
            ("--task", "eval.task", true),
            ("--masks", "eval.masks", true),
        ],
        _ => vec![],
    }
}

struct Parsed {
    cfg: CliConfig,
    /// Free-standing file flags for commands without a config surface.
    extras: std::collections::BTreeMap<String, String>,
}

fn parse_args(command: &str, effective: &str, args: &[String]) -> Result<Parsed> {
    let out_default = std::env::var("RMT_OUT_ROOT").unwrap_or_else(|_| ".".to_string());
    let flags = flag_map(effective);
    let extra_flags: &[&str] = match effective {
        "analyze-sparsity" => &["--masks"],
        "analyze-iou" => &["--a", "--b"],
        "pack" => &["--in", "--out-file"],
        "unpack" => &["--masks", "--out-file"],
        _ => &[],
    };

    // first pass: config file and output directory
    let mut config_path = None;
    let mut out = out_default;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                config_path = Some(
                    args.get(i + 1)
                        .ok_or_else(|| Error::Config("--config needs a path".into()))?
                        .clone(),
                );
                i += 2;
            }
            "--out" => {
                out = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Config("--out needs a path".into()))?
                    .clone();
                i += 2;
            }
            _ => i += 1,
        }
    }

    let mut cfg = CliConfig::new(command, out);
    if let Some(p) = &config_path {
        cfg.load_file(std::path::Path::new(p))?;
    }

    // second pass: flag overrides in order
    let mut extras = std::collections::BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = args[i].as_str();
        if arg == "--config" || arg == "--out" {
            i += 2;
            continue;
        }
        if arg == "--set" {
            let kv = args
                .get(i + 1)
                .ok_or_else(|| Error::Config("--set needs KEY=VALUE".into()))?;
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{kv}' is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
            i += 2;
            continue;
        }
        if extra_flags.contains(&arg) {
            let v = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("{arg} needs a value")))?;
            extras.insert(arg.to_string(), v.clone());
            i += 2;
            continue;
        }
        match flags.iter().find(|(f, _, _)| *f == arg) {
            Some((_, key, true)) => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Config(format!("{arg} needs a value")))?;
                cfg.set(key, v)?;
                i += 2;
            }
            Some((_, key, false)) => {
                cfg.set(key, "true")?;
                i += 1;
            }
            None => return Err(Error::Config(format!("unknown option '{arg}'"))),
        }
    }
    Ok(Parsed { cfg, extras })
}

fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        return Err(Error::Config("no command given".into()));
    };
    match command.as_str() {
        "gen" => commands::cmd_gen(&parse_args("gen", "gen", &args[1..])?.cfg),
        "pretrain" => commands::cmd_pretrain(&parse_args("pretrain", "pretrain", &args[1..])?.cfg),
        "tune" => commands::cmd_tune(&parse_args("tune", "tune", &args[1..])?.cfg),
        "eval" => commands::cmd_eval(&parse_args("eval", "eval", &args[1..])?.cfg),
        "analyze" => {
            let Some(sub) = args.get(1) else {
                return Err(Error::Config(
                    "analyze needs a subcommand: delta | sparsity | iou".into(),
                ));
            };
            match sub.as_str() {
                "delta" => {
                    let p = parse_args("analyze", "analyze-delta", &args[2..])?;
                    commands::cmd_analyze_delta(&p.cfg)
                }
                "sparsity" => {
                    let p = parse_args("analyze", "analyze-sparsity", &args[2..])?;
                    let masks = p
                        .extras
                        .get("--masks")
                        .ok_or_else(|| Error::Config("analyze sparsity needs --masks".into()))?;
                    commands::cmd_analyze_sparsity(&p.cfg, masks)
                }
                "iou" => {
                    let p = parse_args("analyze", "analyze-iou", &args[2..])?;
                    let a = p
                        .extras
                        .get("--a")
                        .ok_or_else(|| Error::Config("analyze iou needs --a".into()))?;
                    let b = p
                        .extras
                        .get("--b")
                        .ok_or_else(|| Error::Config("analyze iou needs --b".into()))?;
                    commands::cmd_analyze_iou(&p.cfg, a, b)
                }
                other => Err(Error::Config(format!("unknown analyze subcommand '{other}'"))),
            }
        }
        "pack" => {
            let p = parse_args("pack", "pack", &args[1..])?;
            let input = p
                .extras
                .get("--in")
                .ok_or_else(|| Error::Config("pack needs --in".into()))?;
            let output = p
                .extras
                .get("--out-file")
                .ok_or_else(|| Error::Config("pack needs --out-file".into()))?;
            commands::cmd_pack(input, output)
        }
        "unpack" => {
            let p = parse_args("unpack", "unpack", &args[1..])?;
            let masks = p
                .extras
                .get("--masks")
                .ok_or_else(|| Error::Config("unpack needs --masks".into()))?;
            commands::cmd_unpack(masks, p.extras.get("--out-file").map(|s| s.as_str()))
        }
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command '{other}'"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rmt: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
