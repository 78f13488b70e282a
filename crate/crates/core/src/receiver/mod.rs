//! Persona perception: dual encoders, relevance matrix and annealed aggregation.

mod model;
mod scoring;
mod train;

pub use model::{perception_from_encodings, Receiver, ReceiverConfig, ReceiverGrads, ReceiverLoss, RECEIVER_KIND};
pub use scoring::{
    agg, cumulative_score, hinge, receiver_loss, receiver_loss_value, relevance_matrix, tau_schedule, ReceiverLossParams,
};
pub use train::{
    evaluate_item, impression_items, persona_pool, real_over_distractor_rate, train_receiver, ImpressionItem,
    ReceiverEpochLog, ReceiverTrainConfig,
};
