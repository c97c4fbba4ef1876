//! Few-shot task construction: the synthetic generator and feature-file
//! ingestion.
//!
//! The synthetic generator builds a broad base classification task for
//! surrogate pretraining and a shifted downstream task for mask tuning. Base
//! samples are a class prototype broadcast over tokens plus per-token
//! Gaussian noise. Downstream samples additionally pass through a fixed
//! random rotation of a token subspace and pick up amplified noise along a
//! few fixed nuisance directions, so the frozen encoder still contains the
//! knowledge the task needs but no longer surfaces it zero-shot.
//!
//! Feature task files (magic "RMTF") carry flat per-sample vectors:
//! version u32, sample count u32, feature dim u32, class count u32, then per
//! sample a u32 label and dim little-endian f32 values.

use crate::error::{Error, Result};
use crate::rng::{derive_stream, SplitMix64};
use crate::tensor::Tensor;
use crate::wire::{self, Reader};

pub const TASK_MAGIC: &[u8; 4] = b"RMTF";
pub const TASK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Samples are token grids [T x d]; the full encoder runs.
    Tokens,
    /// Samples are single feature vectors [d]; only the projection head runs.
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Tensor,
    pub label: usize,
}

/// Base/new class partition for the generalization protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNewSplit {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub kind: TaskKind,
    pub class_count: usize,
    /// Training samples per class.
    pub shots: usize,
    /// Model prototype row for each task label.
    pub class_ids: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub split: Option<BaseNewSplit>,
}

impl FewShotTask {
    pub fn new(
        kind: TaskKind,
        class_count: usize,
        class_ids: Vec<usize>,
        train: Vec<Sample>,
        test: Vec<Sample>,
        split: Option<BaseNewSplit>,
    ) -> Result<Self> {
        if class_ids.len() != class_count {
            return Err(Error::Config(format!(
                "{} class ids for {} classes",
                class_ids.len(),
                class_count
            )));
        }
        // every class present in the train set contributes the same shot count
        let mut counts = vec![0usize; class_count];
        for s in &train {
            if s.label >= class_count {
                return Err(Error::Index(format!(
                    "train label {} out of [0, {})",
                    s.label, class_count
                )));
            }
            counts[s.label] += 1;
        }
        for s in &test {
            if s.label >= class_count {
                return Err(Error::Index(format!(
                    "test label {} out of [0, {})",
                    s.label, class_count
                )));
            }
        }
        let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        let shots = present.first().copied().unwrap_or(0);
        if present.iter().any(|&c| c != shots) {
            return Err(Error::Validation(format!(
                "unequal shots per class: {counts:?}"
            )));
        }
        Ok(FewShotTask { kind, class_count, shots, class_ids, train, test, split })
    }
}

/// Everything the generator needs; defaults give the standard desk-scale
/// setup (d = 32, 8 tokens, 40 base classes, 10 downstream classes).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub seed: u64,
    pub classes: usize,
    pub base_classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub tokens: usize,
    pub sigma_pre: f64,
    pub sigma_shift: f64,
    pub rotation_angle: f64,
    pub rotation_planes: usize,
    pub nuisance_dims: usize,
    pub base_train_per_class: usize,
    pub base_test_per_class: usize,
    pub test_per_class: usize,
    pub base_new_split: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            classes: 10,
            base_classes: 40,
            shots: 16,
            dim: 32,
            tokens: 8,
            sigma_pre: 0.25,
            sigma_shift: 0.75,
            rotation_angle: 0.55,
            rotation_planes: 6,
            nuisance_dims: 8,
            base_train_per_class: 16,
            base_test_per_class: 4,
            test_per_class: 20,
            base_new_split: false,
        }
    }
}

pub struct SyntheticTask {
    pub base: FewShotTask,
    pub downstream: FewShotTask,
    /// Unit-norm class prototype directions, one row per base class.
    pub prototypes: Tensor,
}

/// Unit-norm prototype directions for `count` classes, derived only from the
/// task seed, so checkpoints and task files can be regenerated independently.
pub fn class_prototypes(seed: u64, count: usize, dim: usize) -> Tensor {
    let mut rng = derive_stream(seed, 101);
    let mut t = Tensor::zeros(vec![count, dim]);
    for i in 0..count {
        let mut norm = 0.0;
        let mut row = vec![0.0; dim];
        for e in row.iter_mut() {
            *e = rng.next_normal();
            norm += *e * *e;
        }
        let norm = norm.sqrt();
        for (j, e) in row.iter().enumerate() {
            t.set2(i, j, e / norm);
        }
    }
    t
}

struct Shift {
    /// Orthonormal direction pairs; each pair spans a rotated plane.
    planes: Vec<(Vec<f64>, Vec<f64>)>,
    angle: f64,
    /// Orthonormal nuisance directions receiving amplified noise.
    nuisance: Vec<Vec<f64>>,
}

impl Shift {
    fn build(cfg: &TaskConfig) -> Result<Self> {
        let want = 2 * cfg.rotation_planes + cfg.nuisance_dims;
        if want > cfg.dim {
            return Err(Error::Config(format!(
                "{} rotation planes + {} nuisance dims need {} directions in dimension {}",
                cfg.rotation_planes, cfg.nuisance_dims, want, cfg.dim
            )));
        }
        let mut rng = derive_stream(cfg.seed, 102);
        let dirs = orthonormal_directions(&mut rng, want, cfg.dim);
        let mut planes = Vec::with_capacity(cfg.rotation_planes);
        for p in 0..cfg.rotation_planes {
            planes.push((dirs[2 * p].clone(), dirs[2 * p + 1].clone()));
        }
        let nuisance = dirs[2 * cfg.rotation_planes..].to_vec();
        Ok(Shift { planes, angle: cfg.rotation_angle, nuisance })
    }

    /// Rotate each configured plane of `x` in place by the fixed angle.
    fn rotate(&self, x: &mut [f64]) {
        let (sin, cos) = self.angle.sin_cos();
        for (a, b) in &self.planes {
            let xa: f64 = x.iter().zip(a).map(|(v, d)| v * d).sum();
            let xb: f64 = x.iter().zip(b).map(|(v, d)| v * d).sum();
            let na = xa * cos - xb * sin;
            let nb = xa * sin + xb * cos;
            for i in 0..x.len() {
                x[i] += (na - xa) * a[i] + (nb - xb) * b[i];
            }
        }
    }
}

fn orthonormal_directions(rng: &mut SplitMix64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt over Gaussian draws; dim >> count keeps this stable
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        for d in &dirs {
            let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            for (e, de) in v.iter_mut().zip(d) {
                *e -= proj * de;
            }
        }
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for e in v.iter_mut() {
                *e /= norm;
            }
            dirs.push(v);
        }
    }
    dirs
}

fn token_sample(
    proto: &[f64],
    tokens: usize,
    sigma_pre: f64,
    shift: Option<&Shift>,
    sigma_shift: f64,
    rng: &mut SplitMix64,
) -> Tensor {
    let dim = proto.len();
    // nuisance offsets are per sample, not per token, so pooling cannot
    // average them away
    let nuisance_offset: Vec<f64> = match shift {
        Some(s) => {
            let mut off = vec![0.0; dim];
            for dir in &s.nuisance {
                let z = sigma_shift * rng.next_normal();
                for (o, d) in off.iter_mut().zip(dir) {
                    *o += z * d;
                }
            }
            off
        }
        None => vec![0.0; dim],
    };
    let mut data = Vec::with_capacity(tokens * dim);
    for _ in 0..tokens {
        let mut row: Vec<f64> =
            proto.iter().map(|&p| p + sigma_pre * rng.next_normal()).collect();
        if let Some(s) = shift {
            s.rotate(&mut row);
        }
        for (e, o) in row.iter_mut().zip(&nuisance_offset) {
            *e += o;
        }
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![tokens, dim], data).expect("token grid shape")
}

/// Build the base pretraining task and the shifted downstream few-shot task.
/// Fully deterministic in the seed.
pub fn generate_synthetic_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    if cfg.classes < 2 {
        return Err(Error::Config("need at least 2 downstream classes".into()));
    }
    if cfg.shots < 1 {
        return Err(Error::Config("need at least 1 shot".into()));
    }
    if cfg.classes > cfg.base_classes {
        return Err(Error::Config(format!(
            "{} downstream classes exceed the {}-class base pool",
            cfg.classes, cfg.base_classes
        )));
    }
    if cfg.tokens < 1 {
        return Err(Error::Config("need at least 1 token".into()));
    }
    let prototypes = class_prototypes(cfg.seed, cfg.base_classes, cfg.dim);
    let shift = Shift::build(cfg)?;

    let mut base_rng = derive_stream(cfg.seed, 103);
    let mut base_train = Vec::new();
    let mut base_test = Vec::new();
    for c in 0..cfg.base_classes {
        let proto = prototypes.row(c).to_vec();
        for _ in 0..cfg.base_train_per_class {
            base_train.push(Sample {
                data: token_sample(&proto, cfg.tokens, cfg.sigma_pre, None, 0.0, &mut base_rng),
                label: c,
            });
        }
        for _ in 0..cfg.base_test_per_class {
            base_test.push(Sample {
                data: token_sample(&proto, cfg.tokens, cfg.sigma_pre, None, 0.0, &mut base_rng),
                label: c,
            });
        }
    }
    let base = FewShotTask::new(
        TaskKind::Tokens,
        cfg.base_classes,
        (0..cfg.base_classes).collect(),
        base_train,
        base_test,
        None,
    )?;

    // downstream classes are the first `classes` base classes; their
    // prototypes stay valid while the image distribution shifts
    let split = if cfg.base_new_split {
        let half = cfg.classes / 2;
        Some(BaseNewSplit {
            base_classes: (0..half).collect(),
            new_classes: (half..cfg.classes).collect(),
        })
    } else {
        None
    };
    let mut down_rng = derive_stream(cfg.seed, 104);
    let mut down_train = Vec::new();
    let mut down_test = Vec::new();
    for c in 0..cfg.classes {
        let proto = prototypes.row(c).to_vec();
        let train_here = match &split {
            Some(s) => s.base_classes.contains(&c),
            None => true,
        };
        if train_here {
            for _ in 0..cfg.shots {
                down_train.push(Sample {
                    data: token_sample(
                        &proto,
                        cfg.tokens,
                        cfg.sigma_pre,
                        Some(&shift),
                        cfg.sigma_shift,
                        &mut down_rng,
                    ),
                    label: c,
                });
            }
        } else {
            // keep the stream layout identical whether or not a class is
            // trained, so split and unsplit tasks share test draws
            for _ in 0..cfg.shots {
                let _ = token_sample(
                    &proto,
                    cfg.tokens,
                    cfg.sigma_pre,
                    Some(&shift),
                    cfg.sigma_shift,
                    &mut down_rng,
                );
            }
        }
        for _ in 0..cfg.test_per_class {
            down_test.push(Sample {
                data: token_sample(
                    &proto,
                    cfg.tokens,
                    cfg.sigma_pre,
                    Some(&shift),
                    cfg.sigma_shift,
                    &mut down_rng,
                ),
                label: c,
            });
        }
    }
    let downstream = FewShotTask::new(
        TaskKind::Tokens,
        cfg.classes,
        (0..cfg.classes).collect(),
        down_train,
        down_test,
        split,
    )?;

    Ok(SyntheticTask { base, downstream, prototypes })
}

// ---------------------------------------------------------------------------
// RMTF files
// ---------------------------------------------------------------------------

/// Serialize samples as a flat-vector task file. Token grids flatten
/// row-major; the manifest records the token count needed to reshape.
pub fn write_task_file(path: &std::path::Path, samples: &[Sample], class_count: usize) -> Result<()> {
    let dim = samples.first().map(|s| s.data.len()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(TASK_MAGIC);
    wire::put_u32(&mut out, TASK_VERSION);
    wire::put_u32(&mut out, samples.len() as u32);
    wire::put_u32(&mut out, dim as u32);
    wire::put_u32(&mut out, class_count as u32);
    for s in samples {
        if s.data.len() != dim {
            return Err(Error::Shape("samples of unequal length".into()));
        }
        wire::put_u32(&mut out, s.label as u32);
        for &v in s.data.data() {
            wire::put_f32(&mut out, v as f32);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
struct RawTaskFile {
    samples: Vec<Sample>,
    dim: usize,
    class_count: usize,
}

fn read_task_file(path: &std::path::Path) -> Result<RawTaskFile> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf, "task file");
    let magic = r.take(4, "magic")?;
    if magic != TASK_MAGIC {
        return Err(Error::Format(format!(
            "task file {}: bad magic {:02x?}, expected \"RMTF\"",
            path.display(),
            magic
        )));
    }
    let version = r.u32("version")?;
    if version != TASK_VERSION {
        return Err(Error::Format(format!("task file: unsupported version {version}")));
    }
    let count = r.u32("sample count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    let class_count = r.u32("class count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = r.u32("label")? as usize;
        if label >= class_count {
            return Err(Error::Format(format!(
                "task file: sample {} label {} out of [0, {}) at byte offset {}",
                i,
                label,
                class_count,
                r.offset()
            )));
        }
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(r.f32("feature value")? as f64);
        }
        samples.push(Sample { data: Tensor::new(vec![dim], data)?, label });
    }
    r.expect_end()?;
    Ok(RawTaskFile { samples, dim, class_count })
}

/// Load a train/test pair of feature files. Rows are L2-normalized; the
/// encoder is bypassed, so masking applies to the projection head only.
pub fn load_feature_task(
    train_path: &std::path::Path,
    test_path: &std::path::Path,
) -> Result<FewShotTask> {
    let train = read_task_file(train_path)?;
    let test = read_task_file(test_path)?;
    if train.dim != test.dim {
        return Err(Error::Format(format!(
            "feature dim {} in train vs {} in test",
            train.dim, test.dim
        )));
    }
    let class_count = train.class_count.max(test.class_count);
    let normalize = |mut s: Sample| -> Result<Sample> {
        let norm = s.data.l2_norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero-norm feature row".into()));
        }
        for e in s.data.data_mut() {
            *e /= norm;
        }
        Ok(s)
    };
    let train_samples: Vec<Sample> =
        train.samples.into_iter().map(normalize).collect::<Result<_>>()?;
    let test_samples: Vec<Sample> =
        test.samples.into_iter().map(normalize).collect::<Result<_>>()?;
    FewShotTask::new(
        TaskKind::Features,
        class_count,
        (0..class_count).collect(),
        train_samples,
        test_samples,
        None,
    )
}

/// Load a train/test pair of token files, reshaping rows into [tokens x d].
pub fn load_token_task(
    train_path: &std::path::Path,
    test_path: &std::path::Path,
    tokens: usize,
    class_ids: Vec<usize>,
    split: Option<BaseNewSplit>,
) -> Result<FewShotTask> {
    let train = read_task_file(train_path)?;
    let test = read_task_file(test_path)?;
    if train.dim != test.dim {
        return Err(Error::Format(format!(
            "dim {} in train vs {} in test",
            train.dim, test.dim
        )));
    }
    if tokens == 0 || train.dim % tokens != 0 {
        return Err(Error::Format(format!(
            "flat dim {} is not a multiple of {} tokens",
            train.dim, tokens
        )));
    }
    let d = train.dim / tokens;
    let reshape = |s: Sample| -> Result<Sample> {
        Ok(Sample { data: Tensor::new(vec![tokens, d], s.data.into_data())?, label: s.label })
    };
    let class_count = train.class_count.max(test.class_count);
    let train_samples: Vec<Sample> =
        train.samples.into_iter().map(reshape).collect::<Result<_>>()?;
    let test_samples: Vec<Sample> =
        test.samples.into_iter().map(reshape).collect::<Result<_>>()?;
    FewShotTask::new(
        TaskKind::Tokens,
        class_count,
        class_ids,
        train_samples,
        test_samples,
        split,
    )
}
