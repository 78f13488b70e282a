//! Minimal sequence-model and optimisation substrate shared by the
//! transmitter and the receiver.

mod adam;
mod checkpoint;
mod gradcheck;
mod model;
mod tape;

pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::{params_fingerprint, Checkpoint, Header, TensorEntry, FORMAT_VERSION, MAGIC};
pub use gradcheck::{grad_check, GradCheckReport, Probe, REL_ERROR_FLOOR};
pub use model::{SequenceModel, SequenceModelConfig};
pub use tape::{
    log_sigmoid, log_softmax, sigmoid, softmax_row, Backward, Gradients, Graph, Matrix, ParamId,
    ParamStore, Var,
};
