//! Dense tensors, a reverse-mode tape and the layer set used by the encoders.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container, FORMAT_VERSION};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{sigmoid, BatchNormArgs, Graph, Mode, Var};
pub use layers::{BatchNorm, BiLstm, Conv2d, Dense, LstmDirection, NormConfig};
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use params::{glorot_uniform, uniform, Entry, EntryKind, ParamId, ParamStore, StatUpdate};
pub use tensor::Tensor;

/// Clamp floor for probabilities inside logs.
pub const LOG_EPS: f64 = 1e-7;
