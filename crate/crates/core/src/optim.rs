//! Optimizers and the learning-rate schedule.

use crate::tensor::Tensor;

/// Bias-corrected Adam state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn with_defaults(shape: &[usize]) -> Self {
        Self::new(shape, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    /// One Adam update of `param` with gradient `grad` at step size `lr`.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let m = self.beta1 * self.m.data()[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v.data()[i] + (1.0 - self.beta2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let mhat = m / b1t;
            let vhat = v / b2t;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Plain gradient descent step.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    debug_assert_eq!(param.shape(), grad.shape());
    for i in 0..param.len() {
        param.data_mut()[i] -= lr * grad.data()[i];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to 0 over the run, no restarts.
    Cosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> crate::error::Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(crate::error::Error::Config(format!("unknown schedule '{s}'"))),
        }
    }

    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> crate::error::Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(crate::error::Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}
