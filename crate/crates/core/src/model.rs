//! The frozen dual-encoder classifier.
//!
//! `DualEncoder` pairs a matrix of unit-norm class prototypes (standing in
//! for text features) with a small pre-norm transformer image encoder whose
//! weight matrices are all maskable. Classification is a softmax over
//! cosine similarities divided by a temperature. The encoder is trained once
//! by `pretrain_surrogate` and frozen; afterwards only mask weights change.
//!
//! Checkpoint layout: magic "RMTW", version u32 = 1, then per named
//! parameter tensor a u16-length UTF-8 name, ndim u8, dims u64 each, and a
//! little-endian f64 row-major payload.

use crate::error::{Error, Result};
use crate::mask::{Granularity, MaskedLinear};
use crate::optim::AdamState;
use crate::rng::{derive_stream, SplitMix64};
use crate::tape::{Tape, Var};
use crate::task::{FewShotTask, Sample, TaskKind};
use crate::tensor::{softmax_rows, Tensor};
use crate::wire::{self, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMTW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default mask initialization and threshold: every element starts at 0.01
/// against a hard threshold of 0.005, so freshly built masks keep everything.
pub const DEFAULT_MASK_INIT: f64 = 1e-2;
pub const DEFAULT_THRESHOLD: f64 = 5e-3;

/// Floor for the learnable temperature during pretraining.
pub const TAU_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_expansion: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { dim: 32, blocks: 2, heads: 4, mlp_expansion: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams { gamma: Tensor::filled(vec![d], 1.0), beta: Tensor::zeros(vec![d]) }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub wq: MaskedLinear,
    pub wk: MaskedLinear,
    pub wv: MaskedLinear,
    pub wo: MaskedLinear,
    pub w1: MaskedLinear,
    pub w2: MaskedLinear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

/// Which part of the encoder a masked matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerType {
    Mhsa,
    Mlp,
    Projection,
}

impl LayerType {
    pub fn of(name: &str) -> LayerType {
        if name.contains(".attn.") {
            LayerType::Mhsa
        } else if name.contains(".mlp.") {
            LayerType::Mlp
        } else {
            LayerType::Projection
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    prototypes: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub projection: MaskedLinear,
    temperature: f64,
    heads: usize,
}

fn init_linear(
    name: &str,
    out_f: usize,
    in_f: usize,
    rng: &mut SplitMix64,
) -> MaskedLinear {
    let scale = (2.0 / (in_f + out_f) as f64).sqrt();
    let data: Vec<f64> = (0..out_f * in_f).map(|_| scale * rng.next_normal()).collect();
    MaskedLinear::new(
        name,
        Tensor::new(vec![out_f, in_f], data).expect("init shape"),
        Tensor::zeros(vec![out_f]),
        DEFAULT_MASK_INIT,
        DEFAULT_THRESHOLD,
        Granularity::Parameter,
    )
    .expect("init layer")
}

impl DualEncoder {
    /// Fresh random encoder against the given unit-norm prototypes.
    pub fn init(
        dims: &ModelDims,
        prototypes: Tensor,
        temperature: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if dims.heads == 0 || dims.dim % dims.heads != 0 {
            return Err(Error::Shape(format!(
                "head count {} must divide model width {}",
                dims.heads, dims.dim
            )));
        }
        if prototypes.ndim() != 2 || prototypes.cols() != dims.dim {
            return Err(Error::Shape(format!(
                "prototypes {:?} for width {}",
                prototypes.shape(),
                dims.dim
            )));
        }
        validate_prototypes(&prototypes)?;
        if temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let d = dims.dim;
        let hidden = d * dims.mlp_expansion;
        let mut blocks = Vec::with_capacity(dims.blocks);
        for b in 0..dims.blocks {
            blocks.push(TransformerBlock {
                wq: init_linear(&format!("block{b}.attn.wq"), d, d, rng),
                wk: init_linear(&format!("block{b}.attn.wk"), d, d, rng),
                wv: init_linear(&format!("block{b}.attn.wv"), d, d, rng),
                wo: init_linear(&format!("block{b}.attn.wo"), d, d, rng),
                w1: init_linear(&format!("block{b}.mlp.w1"), hidden, d, rng),
                w2: init_linear(&format!("block{b}.mlp.w2"), d, hidden, rng),
                ln1: LayerNormParams::identity(d),
                ln2: LayerNormParams::identity(d),
            });
        }
        let projection = init_linear("proj", d, d, rng);
        Ok(DualEncoder { prototypes, blocks, projection, temperature, heads: dims.heads })
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// All maskable matrices in their stable order: per block the four
    /// attention matrices then the two MLP matrices, then the projection.
    pub fn masked_layers(&self) -> Vec<&MaskedLinear> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 1);
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]);
        }
        out.push(&self.projection);
        out
    }

    pub fn masked_layers_mut(&mut self) -> Vec<&mut MaskedLinear> {
        let mut out: Vec<&mut MaskedLinear> = Vec::with_capacity(self.blocks.len() * 6 + 1);
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.w1);
            out.push(&mut b.w2);
        }
        out.push(&mut self.projection);
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.masked_layers().iter().map(|l| l.name().to_string()).collect()
    }

    /// Reinitialize all mask state for a fresh tuning run; disables every
    /// layer until a policy selects some.
    pub fn reset_masks(&mut self, init: f64, threshold: f64, granularity: Granularity) {
        for l in self.masked_layers_mut() {
            l.reset_mask(init, threshold, granularity);
            l.set_enabled(false);
        }
    }

    pub fn set_enabled_layers(&mut self, ids: &[usize]) {
        for (i, l) in self.masked_layers_mut().into_iter().enumerate() {
            l.set_enabled(ids.contains(&i));
        }
    }

    pub fn enabled_layer_ids(&self) -> Vec<usize> {
        self.masked_layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.enabled())
            .map(|(i, _)| i)
            .collect()
    }

    /// Encode one token grid to a unit-norm feature under the current masks.
    pub fn encode_image(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, self, &[], true)?;
        let feat = encode_sample(&mut tape, &vars, self, tokens, TaskKind::Tokens)?;
        let v = tape.value(feat);
        Tensor::new(vec![v.cols()], v.data().to_vec())
    }

    /// Class probabilities of a feature vector over all prototypes.
    pub fn class_probabilities(&self, feature: &Tensor) -> Result<Tensor> {
        let ids: Vec<usize> = (0..self.class_count()).collect();
        self.class_probabilities_over(feature, &ids)
    }

    /// Class probabilities over a subset of prototype rows. Cosine
    /// similarity normalizes internally, so positive rescaling of the
    /// feature cannot change the result.
    pub fn class_probabilities_over(&self, feature: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut logits = Tensor::zeros(vec![1, ids.len()]);
        for (j, &c) in ids.iter().enumerate() {
            if c >= self.class_count() {
                return Err(Error::Index(format!(
                    "class id {} out of [0, {})",
                    c,
                    self.class_count()
                )));
            }
            let proto = Tensor::new(vec![self.dim()], self.prototypes.row(c).to_vec())?;
            let cos = crate::tensor::cosine_similarity(feature, &proto)?;
            logits.set2(0, j, cos / self.temperature);
        }
        let probs = softmax_rows(&logits);
        Tensor::new(vec![ids.len()], probs.data().to_vec())
    }

    /// Checksum over every frozen parameter (weights, biases, layer norms,
    /// prototypes, temperature). Mask state is excluded on purpose: tuning
    /// must leave this value untouched.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |t: &Tensor| {
            for &v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for l in self.masked_layers() {
            eat(l.theta());
            eat(l.bias());
        }
        for b in &self.blocks {
            eat(&b.ln1.gamma);
            eat(&b.ln1.beta);
            eat(&b.ln2.gamma);
            eat(&b.ln2.beta);
        }
        eat(&self.prototypes);
        eat(&Tensor::scalar(self.temperature));
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        wire::put_u32(&mut out, CHECKPOINT_VERSION);
        let mut put = |name: &str, t: &Tensor| -> Result<()> {
            wire::put_short_string(&mut out, name)?;
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                wire::put_u64(&mut out, d as u64);
            }
            for &v in t.data() {
                wire::put_f64(&mut out, v);
            }
            Ok(())
        };
        put("prototypes", &self.prototypes)?;
        put("temperature", &Tensor::scalar(self.temperature))?;
        put("meta.heads", &Tensor::scalar(self.heads as f64))?;
        for (b, blk) in self.blocks.iter().enumerate() {
            for (tag, l) in
                [("wq", &blk.wq), ("wk", &blk.wk), ("wv", &blk.wv), ("wo", &blk.wo)]
            {
                put(&format!("block{b}.attn.{tag}.weight"), l.theta())?;
                put(&format!("block{b}.attn.{tag}.bias"), l.bias())?;
            }
            put(&format!("block{b}.ln1.gamma"), &blk.ln1.gamma)?;
            put(&format!("block{b}.ln1.beta"), &blk.ln1.beta)?;
            for (tag, l) in [("w1", &blk.w1), ("w2", &blk.w2)] {
                put(&format!("block{b}.mlp.{tag}.weight"), l.theta())?;
                put(&format!("block{b}.mlp.{tag}.bias"), l.bias())?;
            }
            put(&format!("block{b}.ln2.gamma"), &blk.ln2.gamma)?;
            put(&format!("block{b}.ln2.beta"), &blk.ln2.beta)?;
        }
        put("proj.weight", self.projection.theta())?;
        put("proj.bias", self.projection.bias())?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "checkpoint: bad magic {:02x?}, expected \"RMTW\"",
                magic
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
        }
        let mut tensors = std::collections::BTreeMap::new();
        while r.remaining() > 0 {
            let name = r.short_string("tensor name")?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64("value")?);
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        fn grab(
            tensors: &mut std::collections::BTreeMap<String, Tensor>,
            name: &str,
        ) -> Result<Tensor> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor '{name}'")))
        }
        fn lin(
            tensors: &mut std::collections::BTreeMap<String, Tensor>,
            name: String,
        ) -> Result<MaskedLinear> {
            let theta = grab(tensors, &format!("{name}.weight"))?;
            let bias = grab(tensors, &format!("{name}.bias"))?;
            MaskedLinear::new(
                name,
                theta,
                bias,
                DEFAULT_MASK_INIT,
                DEFAULT_THRESHOLD,
                Granularity::Parameter,
            )
        }
        let prototypes = grab(&mut tensors, "prototypes")?;
        validate_prototypes(&prototypes)?;
        let temperature = grab(&mut tensors, "temperature")?.data()[0];
        if temperature <= 0.0 {
            return Err(Error::Format("checkpoint: non-positive temperature".into()));
        }
        let heads = grab(&mut tensors, "meta.heads")?.data()[0] as usize;
        let mut blocks = Vec::new();
        for b in 0.. {
            if !tensors.contains_key(&format!("block{b}.attn.wq.weight")) {
                break;
            }
            let wq = lin(&mut tensors, format!("block{b}.attn.wq"))?;
            let wk = lin(&mut tensors, format!("block{b}.attn.wk"))?;
            let wv = lin(&mut tensors, format!("block{b}.attn.wv"))?;
            let wo = lin(&mut tensors, format!("block{b}.attn.wo"))?;
            let w1 = lin(&mut tensors, format!("block{b}.mlp.w1"))?;
            let w2 = lin(&mut tensors, format!("block{b}.mlp.w2"))?;
            let ln1 = LayerNormParams {
                gamma: grab(&mut tensors, &format!("block{b}.ln1.gamma"))?,
                beta: grab(&mut tensors, &format!("block{b}.ln1.beta"))?,
            };
            let ln2 = LayerNormParams {
                gamma: grab(&mut tensors, &format!("block{b}.ln2.gamma"))?,
                beta: grab(&mut tensors, &format!("block{b}.ln2.beta"))?,
            };
            blocks.push(TransformerBlock { wq, wk, wv, wo, w1, w2, ln1, ln2 });
        }
        let projection = lin(&mut tensors, "proj".to_string())?;
        if !tensors.is_empty() {
            let names: Vec<&String> = tensors.keys().collect();
            return Err(Error::Format(format!("checkpoint: unknown tensors {names:?}")));
        }
        let dim = prototypes.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Format(format!(
                "checkpoint: head count {heads} does not divide width {dim}"
            )));
        }
        Ok(DualEncoder { prototypes, blocks, projection, temperature, heads })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn validate_prototypes(p: &Tensor) -> Result<()> {
    for i in 0..p.rows() {
        let norm: f64 = p.row(i).iter().map(|e| e * e).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "prototype row {i} has norm {norm}, want 1"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape forward
// ---------------------------------------------------------------------------

/// Tape handles for one forward pass: effective weights and biases in masked
/// layer order, layer-norm affines per block, the temperature, and the
/// prototype rows the logits are computed against.
pub struct ModelVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    /// Per block: (ln1.gamma, ln1.beta, ln2.gamma, ln2.beta).
    pub ln: Vec<(Var, Var, Var, Var)>,
    pub tau: Var,
    pub prototypes: Var,
}

/// Register the model's tensors on a tape. `class_ids` picks the prototype
/// rows for the logit head (empty means all). With `use_masks` false, every
/// layer contributes its raw weights; this is the frozen reference path.
pub fn register_model(
    tape: &mut Tape,
    model: &DualEncoder,
    class_ids: &[usize],
    use_masks: bool,
) -> Result<ModelVars> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for layer in model.masked_layers() {
        weights.push(tape.leaf(layer.effective_weight(use_masks)));
        biases.push(tape.leaf(layer.bias().clone()));
    }
    let mut ln = Vec::new();
    for b in &model.blocks {
        ln.push((
            tape.leaf(b.ln1.gamma.clone()),
            tape.leaf(b.ln1.beta.clone()),
            tape.leaf(b.ln2.gamma.clone()),
            tape.leaf(b.ln2.beta.clone()),
        ));
    }
    let tau = tape.leaf(Tensor::scalar(model.temperature));
    let proto = if class_ids.is_empty() {
        model.prototypes.clone()
    } else {
        let d = model.dim();
        let mut rows = Vec::with_capacity(class_ids.len() * d);
        for &c in class_ids {
            if c >= model.class_count() {
                return Err(Error::Index(format!(
                    "class id {} out of [0, {})",
                    c,
                    model.class_count()
                )));
            }
            rows.extend_from_slice(model.prototypes.row(c));
        }
        Tensor::new(vec![class_ids.len(), d], rows)?
    };
    let prototypes = tape.leaf(proto);
    Ok(ModelVars { weights, biases, ln, tau, prototypes })
}

fn linear(tape: &mut Tape, vars: &ModelVars, idx: usize, x: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, vars.weights[idx])?;
    tape.add_row_vec(y, vars.biases[idx])
}

/// Run one sample through the encoder: pre-norm blocks, mean pool, masked
/// projection, L2 normalization. Feature samples skip straight to the
/// projection. Returns a [1 x d] unit-norm feature.
pub fn encode_sample(
    tape: &mut Tape,
    vars: &ModelVars,
    model: &DualEncoder,
    data: &Tensor,
    kind: TaskKind,
) -> Result<Var> {
    let proj_idx = model.blocks.len() * 6;
    match kind {
        TaskKind::Tokens => {
            if data.ndim() != 2 || data.cols() != model.dim() {
                return Err(Error::Shape(format!(
                    "token grid {:?} for width {}",
                    data.shape(),
                    model.dim()
                )));
            }
            if data.rows() < 1 {
                return Err(Error::Shape("need at least one token".into()));
            }
            let mut x = tape.leaf(data.clone());
            for (b, _) in model.blocks.iter().enumerate() {
                let (g1, b1, g2, b2) = vars.ln[b];
                let base = b * 6;
                let h = tape.layer_norm(x, g1, b1)?;
                let q = linear(tape, vars, base, h)?;
                let k = linear(tape, vars, base + 1, h)?;
                let v = linear(tape, vars, base + 2, h)?;
                let attn = tape.attention(q, k, v, model.heads)?;
                let o = linear(tape, vars, base + 3, attn)?;
                x = tape.add(x, o)?;
                let h2 = tape.layer_norm(x, g2, b2)?;
                let a = linear(tape, vars, base + 4, h2)?;
                let a = tape.gelu(a);
                let m = linear(tape, vars, base + 5, a)?;
                x = tape.add(x, m)?;
            }
            let pooled = tape.mean_rows(x)?;
            let projected = linear(tape, vars, proj_idx, pooled)?;
            tape.l2_normalize_rows(projected)
        }
        TaskKind::Features => {
            if data.len() != model.dim() {
                return Err(Error::Shape(format!(
                    "feature of {} for width {}",
                    data.len(),
                    model.dim()
                )));
            }
            let x = tape.leaf(Tensor::new(vec![1, model.dim()], data.data().to_vec())?);
            let projected = linear(tape, vars, proj_idx, x)?;
            tape.l2_normalize_rows(projected)
        }
    }
}

/// Encode a batch and produce the [B x C] logit matrix cos/tau.
pub fn batch_logits(
    tape: &mut Tape,
    vars: &ModelVars,
    model: &DualEncoder,
    samples: &[&Sample],
    kind: TaskKind,
) -> Result<Var> {
    let mut feats = Vec::with_capacity(samples.len());
    for s in samples {
        feats.push(encode_sample(tape, vars, model, &s.data, kind)?);
    }
    let stacked = tape.stack_rows(feats)?;
    let sims = tape.matmul_nt(stacked, vars.prototypes)?;
    tape.div_by_param(sims, vars.tau)
}

/// Class probabilities of the frozen, unmasked model for a batch, detached
/// from any tape. This is the stationary reference the KL term anchors to.
pub fn zero_shot_reference(
    model: &DualEncoder,
    samples: &[&Sample],
    kind: TaskKind,
    class_ids: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, model, class_ids, false)?;
    let logits = batch_logits(&mut tape, &vars, model, samples, kind)?;
    Ok(softmax_rows(tape.value(logits)))
}

// ---------------------------------------------------------------------------
// Surrogate pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tau_init: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dims: ModelDims::default(),
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
            tau_init: 0.07,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Train every encoder parameter (weights, biases, layer norms, temperature)
/// on the base task with cross-entropy; masks stay all-ones. The returned
/// model is the frozen surrogate that mask tuning operates on.
pub fn pretrain_surrogate(
    task: &FewShotTask,
    prototypes: Tensor,
    cfg: &PretrainConfig,
) -> Result<(DualEncoder, PretrainReport)> {
    if task.kind != TaskKind::Tokens {
        return Err(Error::Config("pretraining needs a token task".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("pretraining needs at least 1 epoch".into()));
    }
    if task.train.is_empty() {
        return Err(Error::EmptyDomain("pretraining on an empty train set".into()));
    }
    let mut model = DualEncoder::init(
        &cfg.dims,
        prototypes,
        cfg.tau_init,
        &mut derive_stream(cfg.seed, 201),
    )?;
    let mut data_rng = derive_stream(cfg.seed, 202);
    let n = task.train.len();
    let batch = cfg.batch_size.clamp(1, n);

    // parameter order: per masked layer weight then bias, then all layer
    // norms, then temperature
    let layer_count = model.masked_layers().len();
    let mut adam: Vec<AdamState> = Vec::new();
    for l in model.masked_layers() {
        adam.push(AdamState::with_defaults(l.theta().shape()));
        adam.push(AdamState::with_defaults(l.bias().shape()));
    }
    for b in &model.blocks {
        adam.push(AdamState::with_defaults(b.ln1.gamma.shape()));
        adam.push(AdamState::with_defaults(b.ln1.beta.shape()));
        adam.push(AdamState::with_defaults(b.ln2.gamma.shape()));
        adam.push(AdamState::with_defaults(b.ln2.beta.shape()));
    }
    adam.push(AdamState::with_defaults(&[1]));

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        data_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let vars = register_model(&mut tape, &model, &[], false)?;
            let logits = batch_logits(&mut tape, &vars, &model, &samples, TaskKind::Tokens)?;
            let ce = tape.softmax_cross_entropy(logits, labels)?;
            let loss = tape.value(ce).data()[0];
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "pretraining diverged (loss {loss}) at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            steps += 1;
            let grads = tape.backward(ce)?;

            // pull gradients out in parameter order, then update
            let mut grad_list: Vec<Tensor> = Vec::with_capacity(adam.len());
            for i in 0..layer_count {
                grad_list.push(grads.wrt(vars.weights[i], tape.value(vars.weights[i])));
                grad_list.push(grads.wrt(vars.biases[i], tape.value(vars.biases[i])));
            }
            for &(g1, b1, g2, b2) in &vars.ln {
                for v in [g1, b1, g2, b2] {
                    grad_list.push(grads.wrt(v, tape.value(v)));
                }
            }
            grad_list.push(grads.wrt(vars.tau, tape.value(vars.tau)));
            drop(tape);

            let mut gi = 0;
            for l in model.masked_layers_mut() {
                let (theta, bias) = l.params_mut();
                adam[gi].step(theta, &grad_list[gi], cfg.lr);
                gi += 1;
                adam[gi].step(bias, &grad_list[gi], cfg.lr);
                gi += 1;
            }
            for b in &mut model.blocks {
                for t in [&mut b.ln1.gamma, &mut b.ln1.beta, &mut b.ln2.gamma, &mut b.ln2.beta]
                {
                    adam[gi].step(t, &grad_list[gi], cfg.lr);
                    gi += 1;
                }
            }
            let mut tau_t = Tensor::scalar(model.temperature);
            adam[gi].step(&mut tau_t, &grad_list[gi], cfg.lr);
            model.temperature = tau_t.data()[0].max(TAU_FLOOR);
        }
        epoch_losses.push(loss_sum / steps as f64);
    }

    let train_accuracy = frozen_accuracy(&model, &task.train, &task.class_ids)?;
    Ok((model, PretrainReport { epoch_losses, train_accuracy }))
}

/// Accuracy of the frozen (unmasked) model on a sample set, in percent.
fn frozen_accuracy(model: &DualEncoder, samples: &[Sample], class_ids: &[usize]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let probs = zero_shot_reference(model, &refs, TaskKind::Tokens, class_ids)?;
    let mut hits = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let row = probs.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == s.label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}
