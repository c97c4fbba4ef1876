//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rmt_core::artifact::{mask_iou, ArtifactLayer, MaskArtifact};
use rmt_core::mask::Granularity;
use rmt_core::model::{pretrain_surrogate, DualEncoder, ModelDims, PretrainConfig};
use rmt_core::optim::{OptimizerKind, Schedule};
use rmt_core::task::{
    class_prototypes, generate_synthetic_task, load_feature_task, load_token_task,
    write_task_file, BaseNewSplit, FewShotTask, TaskConfig,
};
use rmt_core::train::{
    delta_report, evaluate, render_diagnostics, render_metrics, run_mask_tuning, select_layers,
    Policy, RunConfig,
};
use rmt_core::{Error, Result};

use crate::config::CliConfig;

fn ensure_out(cfg: &CliConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_echo(cfg: &CliConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("config.resolved"), cfg.render())?;
    Ok(())
}

fn task_config_from(map: &dyn Fn(&str) -> Result<String>) -> Result<TaskConfig> {
    let get_usize = |k: &str| -> Result<usize> {
        map(k)?.parse().map_err(|_| Error::Config(format!("'{k}' is not an integer")))
    };
    let get_f64 = |k: &str| -> Result<f64> {
        map(k)?.parse().map_err(|_| Error::Config(format!("'{k}' is not a number")))
    };
    Ok(TaskConfig {
        seed: map("task.seed")?
            .parse()
            .map_err(|_| Error::Config("'task.seed' is not an integer".into()))?,
        classes: get_usize("task.classes")?,
        base_classes: get_usize("task.base_classes")?,
        shots: get_usize("task.shots")?,
        dim: get_usize("task.dim")?,
        tokens: get_usize("task.tokens")?,
        sigma_pre: get_f64("task.sigma_pre")?,
        sigma_shift: get_f64("task.sigma_shift")?,
        rotation_angle: get_f64("task.rotation_angle")?,
        rotation_planes: get_usize("task.rotation_planes")?,
        nuisance_dims: get_usize("task.nuisance_dims")?,
        base_train_per_class: get_usize("task.base_train_per_class")?,
        base_test_per_class: get_usize("task.base_test_per_class")?,
        test_per_class: get_usize("task.test_per_class")?,
        base_new_split: map("task.split")? == "true",
    })
}

pub fn cmd_gen(cfg: &CliConfig) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let tcfg = task_config_from(&|k| cfg.get(k))?;
    let task = generate_synthetic_task(&tcfg)?;
    write_task_file(&dir.join("base_train.rmtf"), &task.base.train, tcfg.base_classes)?;
    write_task_file(&dir.join("base_test.rmtf"), &task.base.test, tcfg.base_classes)?;
    write_task_file(&dir.join("down_train.rmtf"), &task.downstream.train, tcfg.classes)?;
    write_task_file(&dir.join("down_test.rmtf"), &task.downstream.test, tcfg.classes)?;

    // self-contained manifest: every task key at its resolved value
    let mut manifest = String::new();
    for (key, _) in crate::config::KNOWN_KEYS.iter().filter(|(k, _)| k.starts_with("task.")) {
        manifest.push_str(&format!("{key} = {}\n", cfg.get(key)?));
    }
    std::fs::write(dir.join("task.manifest"), manifest)?;
    write_echo(cfg, &dir)?;
    println!(
        "gen: wrote base task ({} train / {} test) and downstream task ({} train / {} test) to {}",
        task.base.train.len(),
        task.base.test.len(),
        task.downstream.train.len(),
        task.downstream.test.len(),
        dir.display()
    );
    Ok(())
}

fn read_manifest(task_dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = task_dir.join("task.manifest");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("manifest {}: bad line '{line}'", path.display())));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get(map: &BTreeMap<String, String>, key: &str) -> Result<String> {
    map.get(key)
        .cloned()
        .ok_or_else(|| Error::Format(format!("manifest is missing '{key}'")))
}

/// Load the downstream task of a generated directory, or a plain feature
/// task (train.rmtf / test.rmtf) when no manifest is present.
fn load_downstream(task_dir: &Path) -> Result<FewShotTask> {
    if task_dir.join("task.manifest").exists() {
        let m = read_manifest(task_dir)?;
        let tokens: usize = manifest_get(&m, "task.tokens")?
            .parse()
            .map_err(|_| Error::Format("manifest task.tokens".into()))?;
        let classes: usize = manifest_get(&m, "task.classes")?
            .parse()
            .map_err(|_| Error::Format("manifest task.classes".into()))?;
        let split = if manifest_get(&m, "task.split")? == "true" {
            let half = classes / 2;
            Some(BaseNewSplit {
                base_classes: (0..half).collect(),
                new_classes: (half..classes).collect(),
            })
        } else {
            None
        };
        load_token_task(
            &task_dir.join("down_train.rmtf"),
            &task_dir.join("down_test.rmtf"),
            tokens,
            (0..classes).collect(),
            split,
        )
    } else {
        load_feature_task(&task_dir.join("train.rmtf"), &task_dir.join("test.rmtf"))
    }
}

pub fn cmd_pretrain(cfg: &CliConfig) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let task_dir = PathBuf::from(cfg.get("pretrain.task")?);
    let m = read_manifest(&task_dir)?;
    let tokens: usize = manifest_get(&m, "task.tokens")?
        .parse()
        .map_err(|_| Error::Format("manifest task.tokens".into()))?;
    let base_classes: usize = manifest_get(&m, "task.base_classes")?
        .parse()
        .map_err(|_| Error::Format("manifest task.base_classes".into()))?;
    let dim: usize = manifest_get(&m, "task.dim")?
        .parse()
        .map_err(|_| Error::Format("manifest task.dim".into()))?;
    let task_seed: u64 = manifest_get(&m, "task.seed")?
        .parse()
        .map_err(|_| Error::Format("manifest task.seed".into()))?;
    let base = load_token_task(
        &task_dir.join("base_train.rmtf"),
        &task_dir.join("base_test.rmtf"),
        tokens,
        (0..base_classes).collect(),
        None,
    )?;
    let prototypes = class_prototypes(task_seed, base_classes, dim);
    let pcfg = PretrainConfig {
        dims: ModelDims {
            dim,
            blocks: cfg.get_usize("pretrain.blocks")?,
            heads: cfg.get_usize("pretrain.heads")?,
            mlp_expansion: cfg.get_usize("pretrain.mlp_expansion")?,
        },
        epochs: cfg.get_usize("pretrain.epochs")?,
        lr: cfg.get_f64("pretrain.lr")?,
        batch_size: cfg.get_usize("pretrain.batch")?,
        seed: cfg.get_u64("pretrain.seed")?,
        tau_init: cfg.get_f64("pretrain.tau_init")?,
    };
    let (model, report) = pretrain_surrogate(&base, prototypes, &pcfg)?;
    model.save(&dir.join("checkpoint.rmtw"))?;
    let mut metrics = String::from("epoch ce_loss\n");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        metrics.push_str(&format!("{} {}\n", i + 1, loss));
    }
    metrics.push_str(&format!("summary train_accuracy={}\n", report.train_accuracy));
    std::fs::write(dir.join("pretrain.metrics"), metrics)?;
    write_echo(cfg, &dir)?;
    println!(
        "pretrain: base train accuracy {:.2}%, temperature {:.4}, checkpoint at {}",
        report.train_accuracy,
        model.temperature(),
        dir.join("checkpoint.rmtw").display()
    );
    Ok(())
}

fn run_config_from(cfg: &CliConfig) -> Result<RunConfig> {
    let rc = RunConfig {
        policy: Policy::parse(&cfg.get("tune.policy")?)?,
        regularized: cfg.get_bool("tune.regularized")?,
        leak: cfg.get_f64("tune.leak")?,
        threshold: cfg.get_f64("tune.alpha")?,
        mask_init: cfg.get_f64("tune.mask_init")?,
        lr: cfg.get_f64("tune.lr")?,
        epochs: cfg.get_usize("tune.epochs")?,
        batch_size: cfg.get_usize("tune.batch")?,
        optimizer: OptimizerKind::parse(&cfg.get("tune.optimizer")?)?,
        adam_beta1: cfg.get_f64("tune.adam_beta1")?,
        adam_beta2: cfg.get_f64("tune.adam_beta2")?,
        adam_eps: cfg.get_f64("tune.adam_eps")?,
        schedule: Schedule::parse(&cfg.get("tune.schedule")?)?,
        granularity: Granularity::parse(&cfg.get("tune.granularity")?)?,
        diagnostics: cfg.get_bool("tune.diagnostics")?,
        ..RunConfig::default()
    };
    Ok(rc.with_seed(cfg.get_u64("tune.seed")?))
}

pub fn cmd_tune(cfg: &CliConfig) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let mut model = DualEncoder::load(Path::new(&cfg.get("tune.model")?))?;
    let task = load_downstream(Path::new(&cfg.get("tune.task")?))?;
    let rc = run_config_from(cfg)?;
    model.reset_masks(rc.mask_init, rc.threshold, rc.granularity);
    let ids = select_layers(&model, rc.policy, &task, &rc)?;
    model.set_enabled_layers(&ids);
    let report = run_mask_tuning(&mut model, &task, &rc)?;
    report.artifact.save(&dir.join("masks.rmtm"))?;
    std::fs::write(dir.join("tune.metrics"), render_metrics(&report))?;
    if rc.diagnostics {
        std::fs::write(dir.join("tune.diagnostics"), render_diagnostics(&report))?;
    }
    write_echo(cfg, &dir)?;
    println!(
        "tune: {} on {} layers — zero-shot {:.2}%, final {:.2}% ({:+.2}), sparsity {:.2}%, masks at {}",
        report.policy,
        ids.len(),
        report.zero_shot_accuracy,
        report.final_accuracy,
        report.final_accuracy - report.zero_shot_accuracy,
        report.final_sparsity,
        dir.join("masks.rmtm").display()
    );
    if let Some((base, new, h)) = report.base_new {
        println!("tune: base {base:.2}% new {new:.2}% harmonic {h:.2}%");
    }
    Ok(())
}

pub fn cmd_eval(cfg: &CliConfig) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let mut model = DualEncoder::load(Path::new(&cfg.get("eval.model")?))?;
    let task = load_downstream(Path::new(&cfg.get("eval.task")?))?;
    let masks = cfg.get_opt("eval.masks");
    if let Some(m) = &masks {
        let artifact = MaskArtifact::load(Path::new(m))?;
        artifact.apply_to(model.masked_layers_mut())?;
    }
    let eval = evaluate(&model, &task, masks.is_some())?;
    let mut record = String::new();
    record.push_str(&format!("accuracy = {}\n", eval.accuracy));
    if let Some((base, new, h)) = eval.base_new {
        record.push_str(&format!("base = {base}\nnew = {new}\nharmonic = {h}\n"));
    }
    for (c, acc) in eval.per_class.iter().enumerate() {
        record.push_str(&format!("class_{c} = {acc}\n"));
    }
    std::fs::write(dir.join("eval.record"), &record)?;
    write_echo(cfg, &dir)?;
    println!(
        "eval: accuracy {:.2}%{}",
        eval.accuracy,
        if masks.is_some() { " (masked)" } else { " (zero-shot)" }
    );
    if let Some((base, new, h)) = eval.base_new {
        println!("eval: base {base:.2}% new {new:.2}% harmonic {h:.2}%");
    }
    Ok(())
}

pub fn cmd_analyze_delta(cfg: &CliConfig) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let model = DualEncoder::load(Path::new(&cfg.get("tune.model")?))?;
    let task = load_downstream(Path::new(&cfg.get("tune.task")?))?;
    let rc = run_config_from(cfg)?;
    let report = delta_report(&model, &task, &rc)?;
    let width = report.rows.iter().map(|r| r.layer.len()).max().unwrap_or(8).max(5);
    println!("{:<width$}  {:<10}  delta", "layer", "type");
    let mut record = String::from("layer type delta\n");
    for row in &report.rows {
        let ty = match row.layer_type {
            rmt_core::model::LayerType::Mhsa => "mhsa",
            rmt_core::model::LayerType::Mlp => "mlp",
            rmt_core::model::LayerType::Projection => "projection",
        };
        println!("{:<width$}  {:<10}  {:.9}", row.layer, ty, row.delta);
        record.push_str(&format!("{} {} {}\n", row.layer, ty, row.delta));
    }
    println!("{:<width$}  {:<10}  {:.9}", "group:mhsa", "mean", report.mhsa_mean);
    println!("{:<width$}  {:<10}  {:.9}", "group:mlp", "mean", report.mlp_mean);
    record.push_str(&format!("group:mhsa mean {}\n", report.mhsa_mean));
    record.push_str(&format!("group:mlp mean {}\n", report.mlp_mean));
    std::fs::write(dir.join("delta.record"), record)?;
    Ok(())
}

pub fn cmd_analyze_sparsity(cfg: &CliConfig, masks_path: &str) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let artifact = MaskArtifact::load(Path::new(masks_path))?;
    let width = artifact.layers.iter().map(|l| l.name.len()).max().unwrap_or(8).max(5);
    println!("{:<width$}  {:>10}  {:>10}  sparsity%", "layer", "zeros", "bits");
    let mut record = String::from("layer zeros bits sparsity\n");
    for l in &artifact.layers {
        let zeros = l.zero_count()?;
        let pct = 100.0 * zeros as f64 / l.bit_count as f64;
        println!("{:<width$}  {:>10}  {:>10}  {:.4}", l.name, zeros, l.bit_count, pct);
        record.push_str(&format!("{} {} {} {}\n", l.name, zeros, l.bit_count, pct));
    }
    let total = artifact.sparsity()?;
    println!("{:<width$}  {:>10}  {:>10}  {:.4}", "total", "", "", total);
    record.push_str(&format!("total - - {total}\n"));
    std::fs::write(dir.join("sparsity.record"), record)?;
    Ok(())
}

pub fn cmd_analyze_iou(cfg: &CliConfig, a: &str, b: &str) -> Result<()> {
    let dir = ensure_out(cfg)?;
    let art_a = MaskArtifact::load(Path::new(a))?;
    let art_b = MaskArtifact::load(Path::new(b))?;
    let iou = mask_iou(&art_a, &art_b)?;
    println!("iou = {iou:.3}");
    std::fs::write(dir.join("iou.record"), format!("iou = {iou}\n"))?;
    Ok(())
}

// Text form of a mask artifact: header, metadata, then per layer a header
// line and one 0/1 string per matrix row.
pub fn cmd_unpack(masks_path: &str, out_file: Option<&str>) -> Result<()> {
    let artifact = MaskArtifact::load(Path::new(masks_path))?;
    let mut s = String::from("rmt-mask-text 1\n");
    s.push_str(&format!("policy = {}\n", artifact.policy));
    s.push_str(&format!("seed = {}\n", artifact.seed));
    s.push_str(&format!("config_hash = {}\n", artifact.config_hash));
    for l in &artifact.layers {
        s.push_str(&format!(
            "layer = {} / {} / {:?} / {}\n",
            l.name,
            l.granularity.name(),
            l.threshold,
            l.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        ));
        let bits = l.bits()?;
        let cols = *l.shape.last().unwrap_or(&bits.len());
        for row in bits.chunks(cols) {
            let line: String = row.iter().map(|&b| if b { '1' } else { '0' }).collect();
            s.push_str(&line);
            s.push('\n');
        }
    }
    match out_file {
        Some(f) => std::fs::write(f, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

pub fn cmd_pack(in_file: &str, out_file: &str) -> Result<()> {
    let text = std::fs::read_to_string(in_file)
        .map_err(|e| Error::Config(format!("listing {in_file}: {e}")))?;
    let mut lines = text.lines().peekable();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "rmt-mask-text 1" {
        return Err(Error::Format(format!("listing header '{header}' not recognized")));
    }
    let mut meta = BTreeMap::new();
    while let Some(line) = lines.peek() {
        if line.starts_with("layer = ") {
            break;
        }
        let line = lines.next().unwrap();
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let policy = meta.get("policy").cloned().unwrap_or_default();
    let seed: u64 = meta
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("listing is missing a numeric seed".into()))?;
    let config_hash = meta
        .get("config_hash")
        .cloned()
        .ok_or_else(|| Error::Format("listing is missing config_hash".into()))?;

    let mut layers = Vec::new();
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(rest) = line.strip_prefix("layer = ") else {
            return Err(Error::Format(format!("expected a layer line, got '{line}'")));
        };
        let parts: Vec<&str> = rest.split(" / ").collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad layer line '{line}'")));
        }
        let name = parts[0].to_string();
        let granularity = Granularity::parse(parts[1])?;
        let threshold: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("layer '{name}': bad threshold")))?;
        let shape: Vec<usize> = parts[3]
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("layer '{name}': bad shape"))))
            .collect::<Result<_>>()?;
        let total: usize = shape.iter().product();
        let cols = *shape.last().unwrap_or(&total);
        let mut bits = Vec::with_capacity(total);
        while bits.len() < total {
            let Some(row) = lines.next() else {
                return Err(Error::Format(format!("layer '{name}': listing truncated")));
            };
            let row = row.trim();
            if row.len() != cols {
                return Err(Error::Format(format!(
                    "layer '{name}': row of {} chars, expected {cols}",
                    row.len()
                )));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    _ => {
                        return Err(Error::Format(format!(
                            "layer '{name}': bit character '{ch}'"
                        )))
                    }
                }
            }
        }
        layers.push(ArtifactLayer {
            name,
            shape,
            threshold,
            granularity,
            bit_count: total as u64,
            payload: rmt_core::artifact::pack_bits(&bits),
        });
    }
    let artifact = MaskArtifact { layers, policy, seed, config_hash };
    artifact.save(Path::new(out_file))?;
    println!("pack: wrote {out_file}");
    Ok(())
}
