//! Binary mask tuning over a frozen dual-encoder classifier.
//!
//! A small transformer image encoder is pretrained once against fixed class
//! prototypes, then frozen. Adaptation to a downstream task happens purely by
//! learning binary masks over the frozen weight matrices: real-valued mask
//! weights pass through a hard threshold, the binarized mask multiplies the
//! weights elementwise, and the mask weights are updated with the gradient of
//! the binarized mask as a straight-through surrogate. A stochastic gradient
//! dropout regularizer, driven by the agreement between the task loss and a
//! KL term against the frozen model's own predictions, suppresses updates
//! that would overwrite general knowledge.

pub mod artifact;
pub mod error;
pub mod mask;
pub mod model;
pub mod optim;
pub mod regularizer;
pub mod rng;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor;
