//! Persona-conditioned response generation.

mod decode;
mod layout;
mod model;
mod train;

pub use decode::{
    argmax_stable, combined_score, draw, select_candidate, BeamOutput, DecodeMode, DecodeParams, RankMode, Sample,
    ScoredCandidate,
};
pub use layout::{build_layout, EncodedContext, Tail, TokenLayout, SEG_PARTNER, SEG_PERSONA, SEG_RESPONSE, SEG_SELF};
pub use model::{JointLoss, Transmitter, TRANSMITTER_KIND};
pub use train::{eval_mle, prepare_instances, train_supervised, EpochLog, PreparedInstance, TrainConfig};
