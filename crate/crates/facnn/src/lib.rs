//! Feature-aligned convolutional networks with intrinsic class attribution.
//!
//! The crate implements a CNN architecture whose channels keep a fixed
//! class assignment from input to logits. Two pieces make that work:
//!
//! * a dampened skip block, `X_L = ReLU((1-b) X_{L-1} + b tanh(F(X_{L-1})))`
//!   with `b = 1/L`, which bounds each layer's contribution, and
//! * a grouped global-average-pooling head that averages `R` consecutive
//!   channels per class into one pre-logit, followed by L1 normalization.
//!
//! On top of the model the crate ships the analysis tooling that the
//! architecture makes possible: class attribution maps read directly from
//! feature maps, a gradient-based CAM oracle to cross-check them, auditors
//! for the bounded-increment property of the rescaled feature stack, and a
//! pixel-removal benchmark against randomized-masking and occlusion
//! baselines.
//!
//! Everything runs on the built-in CPU tensor type with reverse-mode
//! autodiff; no external ML framework is involved.

pub mod data;
pub mod error;
pub mod export;
pub mod interpret;
pub mod layers;
pub mod model;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{FaError, Result};
pub use layers::SkipKind;
pub use model::{FaModel, FeatureStack, HeadKind, ModelConfig};
pub use tensor::Tensor;
