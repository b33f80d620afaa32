//! Simplified pixel-set encoder with temporal attention, trained by hand-written
//! backpropagation.

pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod posenc;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::focal_loss;
pub use network::{BatchForward, DayProjections, Embedded, Input, Mode};
pub use optim::{adam_step, CosineSchedule, OptimizerState};
pub use params::{ema_update, DomainTag, Gradients, ModelDims, ModelParams, NormStats, Real, Tensor, Weights};
pub use posenc::{positional_encoding, EncodingTable, PosEncConfig};
