//! A miniature differentiable nowcaster: multi-frame radar input, a
//! space-to-depth stem, residual convolutions, single-pass multi-lead output,
//! ordinal or cross-entropy training, and integrated-gradients attribution.

pub mod attribution;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use model::{prepare_input, LossKind, Micromodel, Mode, ModelConfig, RawOutput};
pub use params::ParamSet;
pub use train::{train, TrainConfig, TrainOutcome, TrainSample};
