//! Reverse-mode autodiff over an operation tape.
//!
//! A forward pass records primitive operations in order; `backward` walks the
//! tape in reverse from a scalar root and accumulates exact gradients for
//! every recorded value. The tape is confined to one thread and one
//! forward/backward pass; values are immutable once recorded.
//!
//! `finite_difference_grad` at the bottom is the independent oracle used by
//! the test suite; it never touches the tape.

use crate::error::{Error, Result};
use crate::tensor::{mat_mul, mat_mul_nt, mat_mul_tn, softmax_rows, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// c = a * b
    MatMul { a: Var, b: Var },
    /// c = a * b^T
    MatMulNT { a: Var, b: Var },
    /// y = x + bias (bias broadcast over rows)
    AddRowVec { x: Var, bias: Var },
    /// c = a + b, same shape
    Add { a: Var, b: Var },
    /// c = a .* b, same shape
    Mul { a: Var, b: Var },
    /// y = c * x for a compile-time constant c
    Scale { x: Var, c: f64 },
    /// y = x / d where d is a single-element tape value (temperature)
    DivByParam { x: Var, denom: Var },
    /// [T x d] -> [1 x d] mean over rows
    MeanRows { x: Var },
    /// each row scaled to unit L2 norm
    L2NormalizeRows { x: Var },
    /// per-row standardization followed by affine (gamma, beta are [d])
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu { x: Var },
    /// softmax(Q Kh^T / sqrt(dh)) Vh per head, heads concatenated
    Attention { q: Var, k: Var, v: Var, heads: usize },
    /// vertical concatenation of [1 x d] rows
    StackRows { parts: Vec<Var> },
    /// sum of all elements -> [1]
    Sum { x: Var },
    /// mean over batch of -log softmax(logits)[label] -> [1]
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    /// mean over batch of sum_c p_ref (log p_ref - log softmax(logits)) -> [1]
    KlDivergence { p_ref: Tensor, logits: Var },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar root with respect to every tape value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any path from the root reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros if unreached.
    pub fn wrt(&self, v: Var, shape_of: &Tensor) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape_of.shape().to_vec()),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044715;
// sqrt(2/pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = mat_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, v))
    }

    /// a[m x k] times b[n x k] transposed; the workhorse for `y = x W^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = mat_mul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNT { a, b }, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| c * e);
        self.push(Op::Scale { x, c }, v)
    }

    /// x / d for a one-element parameter d (gradient flows into d as well).
    pub fn div_by_param(&mut self, x: Var, denom: Var) -> Result<Var> {
        if self.value(denom).len() != 1 {
            return Err(Error::Shape("div_by_param wants a single-element denominator".into()));
        }
        let d = self.value(denom).data()[0];
        let v = self.value(x).map(|e| e / d);
        Ok(self.push(Op::DivByParam { x, denom }, v))
    }

    pub fn add_row_vec(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias of {} over rows of {}",
                bv.len(),
                xv.cols()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, e) in out.data_mut().iter_mut().enumerate() {
            *e += bv.data()[i % c];
        }
        Ok(self.push(Op::AddRowVec { x, bias }, out))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.rows() == 0 {
            return Err(Error::Shape("mean_rows needs a nonempty 2-D tensor".into()));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv.at2(i, j);
            }
        }
        for e in out.iter_mut() {
            *e /= r as f64;
        }
        let v = Tensor::new(vec![1, c], out)?;
        Ok(self.push(Op::MeanRows { x }, v))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..r {
            let norm = xv.row(i).iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("l2_normalize of a zero row".into()));
            }
            for j in 0..c {
                out.set2(i, j, xv.at2(i, j) / norm);
            }
        }
        Ok(self.push(Op::L2NormalizeRows { x }, out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape("layer_norm affine params must match width".into()));
        }
        let r = xv.rows();
        let mut out = xv.clone();
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                out.set2(i, j, self.value(gamma).data()[j] * xhat + self.value(beta).data()[j]);
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, out))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu { x }, v)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qv = self.value(q);
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "head count {heads} must divide model width {d}"
            )));
        }
        if self.value(k).shape() != qv.shape() || self.value(v).shape() != qv.shape() {
            return Err(Error::Shape("attention expects Q, K, V of equal shape".into()));
        }
        let out = attention_forward(qv, self.value(k), self.value(v), heads);
        Ok(self.push(Op::Attention { q, k, v, heads }, out))
    }

    pub fn stack_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("stack_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::with_capacity(parts.len() * c);
        for &p in &parts {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(Error::Shape("stack_rows wants [1 x d] parts of equal width".into()));
            }
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::new(vec![parts.len(), c], data)?;
        Ok(self.push(Op::StackRows { parts }, v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Mean cross-entropy over the batch; labels index columns of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), b)));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!("label {y} out of [0, {c}) in row {i}")));
            }
        }
        let logp = crate::tensor::log_softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= logp.at2(i, y);
        }
        loss /= b as f64;
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels }, Tensor::scalar(loss)))
    }

    /// Mean KL(p_ref || softmax(logits)) over the batch. Rows of `p_ref` must
    /// be probability vectors; entries of exactly 0 contribute nothing.
    pub fn kl_divergence(&mut self, p_ref: Tensor, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if p_ref.shape() != lv.shape() {
            return Err(Error::Shape(format!(
                "p_ref {:?} vs logits {:?}",
                p_ref.shape(),
                lv.shape()
            )));
        }
        let (b, c) = (p_ref.rows(), p_ref.cols());
        for i in 0..b {
            let row = p_ref.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Validation(format!("p_ref row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("p_ref row {i} sums to {s}, not 1")));
            }
        }
        let logq = crate::tensor::log_softmax_rows(lv);
        let mut loss = 0.0;
        for i in 0..b {
            for j in 0..c {
                let p = p_ref.at2(i, j);
                if p > 0.0 {
                    loss += p * (p.ln() - logq.at2(i, j));
                }
            }
        }
        // mathematically >= 0; clamp away last-ulp noise at equality
        loss = (loss / b as f64).max(0.0);
        Ok(self.push(Op::KlDivergence { p_ref, logits }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar root. Gradients are exact (up to float
    /// associativity) and independent of how many leaves were registered.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            // ops only reference earlier vars, so grads[idx] is final here
            let Some(g) = grads[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = mat_mul_nt(&g, self.value(*b))?;
                    let db = mat_mul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT { a, b } => {
                    // c = a b^T: da = g b, db = g^T a
                    let da = mat_mul(&g, self.value(*b))?;
                    let db = mat_mul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRowVec { x, bias } => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (i, e) in g.data().iter().enumerate() {
                        db[i % c] += e;
                    }
                    accumulate(&mut grads, *bias, Tensor::new(vec![c], db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, c } => {
                    let cc = *c;
                    accumulate(&mut grads, *x, g.map(|e| cc * e));
                }
                Op::DivByParam { x, denom } => {
                    let d = self.value(*denom).data()[0];
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, g.map(|e| e / d));
                    let dd: f64 = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(ge, xe)| -ge * xe / (d * d))
                        .sum();
                    accumulate(&mut grads, *denom, Tensor::new(vec![1], vec![dd])?);
                }
                Op::MeanRows { x } => {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g.data()[j] / r as f64;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![r, c], dx)?);
                }
                Op::L2NormalizeRows { x } => {
                    let xv = self.value(*x);
                    let yv = &self.nodes[idx].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let norm = xv.row(i).iter().map(|e| e * e).sum::<f64>().sqrt();
                        let ydotg: f64 =
                            yv.row(i).iter().zip(g.row(i)).map(|(y, gg)| y * gg).sum();
                        for j in 0..c {
                            dx[i * c + j] = (g.at2(i, j) - yv.at2(i, j) * ydotg) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![r, c], dx)?);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma);
                    let (r, d) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; r * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..r {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|e| (e - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g.at2(i, j) * gam.data()[j]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dgamma[j] += g.at2(i, j) * xhat[j];
                            dbeta[j] += g.at2(i, j);
                            dx[i * d + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![r, d], dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![d], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![d], dbeta)?);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&e, &ge)| ge * gelu_grad(e))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Attention { q, k, v, heads } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        &g,
                    )?;
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::StackRows { parts } => {
                    let c = g.cols();
                    for (i, &p) in parts.iter().enumerate() {
                        let slice = g.row(i).to_vec();
                        accumulate(&mut grads, p, Tensor::new(vec![1, c], slice)?);
                    }
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(xv.shape().to_vec(), gv));
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let b = lv.rows();
                    let mut dl = softmax_rows(lv);
                    for (i, &y) in labels.iter().enumerate() {
                        let cur = dl.at2(i, y);
                        dl.set2(i, y, cur - 1.0);
                    }
                    let scale = g.data()[0] / b as f64;
                    for e in dl.data_mut() {
                        *e *= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::KlDivergence { p_ref, logits } => {
                    let lv = self.value(*logits);
                    let b = lv.rows();
                    let sm = softmax_rows(lv);
                    let mut dl = sm.zip_map(p_ref, |s, p| s - p)?;
                    let scale = g.data()[0] / b as f64;
                    for e in dl.data_mut() {
                        *e *= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(vec![t, d]);
    for h in 0..heads {
        let off = h * dh;
        // scores[i][j] = q_i . k_j / sqrt(dh), softmax over j, then mix V rows
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for l in 0..dh {
                    s += q.at2(i, off + l) * k.at2(j, off + l);
                }
                scores[j] = s * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            for l in 0..dh {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += scores[j] * v.at2(j, off + l);
                }
                out.set2(i, off + l, acc);
            }
        }
    }
    out
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(vec![t, d]);
    let mut dk = Tensor::zeros(vec![t, d]);
    let mut dv = Tensor::zeros(vec![t, d]);
    for h in 0..heads {
        let off = h * dh;
        // recompute the softmax rows for this head
        let mut attn = vec![vec![0.0; t]; t];
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for l in 0..dh {
                    s += q.at2(i, off + l) * k.at2(j, off + l);
                }
                scores[j] = s * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            attn[i] = scores;
        }
        for i in 0..t {
            // dV += A^T dO
            for j in 0..t {
                for l in 0..dh {
                    let cur = dv.at2(j, off + l);
                    dv.set2(j, off + l, cur + attn[i][j] * g.at2(i, off + l));
                }
            }
            // dA[i][j] = dO_i . V_j, then softmax backward to scores
            let mut da = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for l in 0..dh {
                    s += g.at2(i, off + l) * v.at2(j, off + l);
                }
                da[j] = s;
            }
            let dot: f64 = da.iter().zip(&attn[i]).map(|(a, b)| a * b).sum();
            let ds: Vec<f64> = (0..t).map(|j| attn[i][j] * (da[j] - dot)).collect();
            // dQ_i += ds . K * scale ; dK_j += ds_j * Q_i * scale
            for j in 0..t {
                for l in 0..dh {
                    let cur = dq.at2(i, off + l);
                    dq.set2(i, off + l, cur + ds[j] * k.at2(j, off + l) * scale);
                    let cur = dk.at2(j, off + l);
                    dk.set2(j, off + l, cur + ds[j] * q.at2(i, off + l) * scale);
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h per element.
///
/// Independent of the tape by construction; the standing oracle for every
/// gradient assertion in the test suite.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with an absolute floor, for gradient comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-3, f64::max(a.abs(), b.abs()))
}
