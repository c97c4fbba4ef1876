//! Learnable binary masks over frozen weight matrices.
//!
//! A `MaskedLinear` keeps a frozen weight matrix and bias, a real-valued mask
//! of the same shape, and the cached binarization of that mask. The forward
//! pass multiplies weights and binary mask elementwise (the bias is never
//! masked); updates reach the real-valued mask through the straight-through
//! surrogate: the gradient with respect to the binarized mask stands in for
//! the gradient with respect to the mask weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which unit flips as one group under the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// Every matrix entry thresholds independently.
    Parameter,
    /// Whole input columns keep or drop together (column mean vs threshold).
    InputChannel,
    /// Whole output rows keep or drop together (row mean vs threshold).
    OutputChannel,
}

impl Granularity {
    pub fn code(self) -> u8 {
        match self {
            Granularity::Parameter => 0,
            Granularity::InputChannel => 1,
            Granularity::OutputChannel => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Granularity::Parameter),
            1 => Ok(Granularity::InputChannel),
            2 => Ok(Granularity::OutputChannel),
            _ => Err(Error::Format(format!("unknown granularity code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Parameter => "parameter",
            Granularity::InputChannel => "input-channel",
            Granularity::OutputChannel => "output-channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parameter" => Ok(Granularity::Parameter),
            "input-channel" => Ok(Granularity::InputChannel),
            "output-channel" => Ok(Granularity::OutputChannel),
            _ => Err(Error::Config(format!("unknown granularity '{s}'"))),
        }
    }
}

/// Hard threshold: keep (1) exactly where the effective mask value is
/// strictly greater than `alpha`. Channel granularities reduce the mask by
/// the group mean before comparing, so whole columns/rows flip together.
pub fn binarize(mask: &Tensor, alpha: f64, granularity: Granularity) -> Tensor {
    match granularity {
        Granularity::Parameter => mask.map(|m| if m > alpha { 1.0 } else { 0.0 }),
        Granularity::InputChannel => {
            let (r, c) = (mask.rows(), mask.cols());
            let mut keep = vec![0.0; c];
            for j in 0..c {
                let mean: f64 = (0..r).map(|i| mask.at2(i, j)).sum::<f64>() / r as f64;
                keep[j] = if mean > alpha { 1.0 } else { 0.0 };
            }
            let mut out = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                for j in 0..c {
                    out.set2(i, j, keep[j]);
                }
            }
            out
        }
        Granularity::OutputChannel => {
            let (r, c) = (mask.rows(), mask.cols());
            let mut out = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                let mean: f64 = mask.row(i).iter().sum::<f64>() / c as f64;
                let keep = if mean > alpha { 1.0 } else { 0.0 };
                for j in 0..c {
                    out.set2(i, j, keep);
                }
            }
            out
        }
    }
}

/// A frozen linear layer with a learnable mask over its weight matrix.
#[derive(Clone, Debug)]
pub struct MaskedLinear {
    name: String,
    theta: Tensor,
    bias: Tensor,
    mask: Tensor,
    threshold: f64,
    mask_bin: Tensor,
    granularity: Granularity,
    enabled: bool,
}

impl MaskedLinear {
    pub fn new(
        name: impl Into<String>,
        theta: Tensor,
        bias: Tensor,
        mask_init: f64,
        threshold: f64,
        granularity: Granularity,
    ) -> Result<Self> {
        if theta.ndim() != 2 {
            return Err(Error::Shape("weights must be 2-D".into()));
        }
        if bias.len() != theta.rows() {
            return Err(Error::Shape(format!(
                "bias of {} for {} output rows",
                bias.len(),
                theta.rows()
            )));
        }
        let mask = Tensor::filled(theta.shape().to_vec(), mask_init);
        let mask_bin = binarize(&mask, threshold, granularity);
        Ok(MaskedLinear {
            name: name.into(),
            theta,
            bias,
            mask,
            threshold,
            mask_bin,
            granularity,
            enabled: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn mask_bin(&self) -> &Tensor {
        &self.mask_bin
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    pub fn out_features(&self) -> usize {
        self.theta.rows()
    }

    pub fn in_features(&self) -> usize {
        self.theta.cols()
    }

    /// Overwrite the real-valued mask and recompute the binary cache.
    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        if mask.shape() != self.theta.shape() {
            return Err(Error::Shape("mask shape must match weights".into()));
        }
        self.mask = mask;
        self.rebinarize();
        Ok(())
    }

    /// Reinitialize mask state for a fresh tuning run.
    pub fn reset_mask(&mut self, init: f64, threshold: f64, granularity: Granularity) {
        self.mask = Tensor::filled(self.theta.shape().to_vec(), init);
        self.threshold = threshold;
        self.granularity = granularity;
        self.rebinarize();
    }

    /// Apply an optimizer delta to the mask weights, then refresh the cache.
    pub fn update_mask(&mut self, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.mask);
        self.rebinarize();
    }

    /// Recompute the binary mask from the current real-valued mask.
    pub fn rebinarize(&mut self) {
        self.mask_bin = binarize(&self.mask, self.threshold, self.granularity);
    }

    /// Install an externally stored binary mask (artifact loading).
    pub fn set_mask_bin(&mut self, bin: Tensor) -> Result<()> {
        if bin.shape() != self.theta.shape() {
            return Err(Error::Shape("binary mask shape must match weights".into()));
        }
        self.mask_bin = bin;
        Ok(())
    }

    /// Weights as the forward pass sees them. Multiplying by an all-ones
    /// mask is exact in IEEE arithmetic, so enabling a fresh mask changes
    /// nothing bit for bit.
    pub fn effective_weight(&self, use_masks: bool) -> Tensor {
        if use_masks && self.enabled {
            self.theta.hadamard(&self.mask_bin).expect("mask shape matches theta")
        } else {
            self.theta.clone()
        }
    }

    /// y = (theta ⊙ mask_bin) x + b for a vector, or row-wise for [T x in].
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight(true);
        let (out_f, in_f) = (w.rows(), w.cols());
        match x.ndim() {
            1 => {
                if x.len() != in_f {
                    return Err(Error::Shape(format!(
                        "input of {} for {} columns",
                        x.len(),
                        in_f
                    )));
                }
                let mut y = vec![0.0; out_f];
                for i in 0..out_f {
                    let mut s = 0.0;
                    for j in 0..in_f {
                        s += w.at2(i, j) * x.data()[j];
                    }
                    y[i] = s + self.bias.data()[i];
                }
                Tensor::new(vec![out_f], y)
            }
            2 => {
                let mut y = crate::tensor::mat_mul_nt(x, &w)?;
                let c = y.cols();
                for (i, e) in y.data_mut().iter_mut().enumerate() {
                    *e += self.bias.data()[i % c];
                }
                Ok(y)
            }
            _ => Err(Error::Shape("apply expects a vector or a 2-D tensor".into())),
        }
    }

    /// Straight-through gradient for the mask weights.
    ///
    /// The gradient with respect to the masked weights, times theta, is the
    /// exact gradient with respect to the binary mask; the identity surrogate
    /// passes it through the threshold unchanged. Channel granularities sum
    /// the per-element values over each masked group.
    pub fn ste_gradient(&self, grad_wrt_masked: &Tensor) -> Result<Tensor> {
        if grad_wrt_masked.shape() != self.theta.shape() {
            return Err(Error::Shape("gradient shape must match weights".into()));
        }
        let elementwise = self.theta.hadamard(grad_wrt_masked)?;
        match self.granularity {
            Granularity::Parameter => Ok(elementwise),
            Granularity::InputChannel => {
                let (r, c) = (elementwise.rows(), elementwise.cols());
                let mut col_sum = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        col_sum[j] += elementwise.at2(i, j);
                    }
                }
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        out.set2(i, j, col_sum[j]);
                    }
                }
                Ok(out)
            }
            Granularity::OutputChannel => {
                let (r, c) = (elementwise.rows(), elementwise.cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let s: f64 = elementwise.row(i).iter().sum();
                    for j in 0..c {
                        out.set2(i, j, s);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn zero_count(&self) -> usize {
        self.mask_bin.data().iter().filter(|&&b| b == 0.0).count()
    }

    /// Weight/bias mutation for surrogate pretraining only. Once a model is
    /// handed to mask tuning these never change.
    pub(crate) fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.theta, &mut self.bias)
    }
}

/// Percentage of masked positions currently dropped, over enabled layers.
pub fn sparsity(layers: &[&MaskedLinear]) -> Result<f64> {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for layer in layers {
        if !layer.enabled() {
            continue;
        }
        zeros += layer.zero_count();
        total += layer.mask_bin().len();
    }
    if total == 0 {
        return Err(Error::EmptyDomain("sparsity over no enabled layers".into()));
    }
    Ok(100.0 * zeros as f64 / total as f64)
}
