//! Persona-conditioned dialogue generation.
//!
//! The crate is organised around two models. The *transmitter* is a causal
//! transformer that writes responses conditioned on a persona and dialogue
//! history, with an auxiliary next-utterance classifier on a trailing `[CLS]`
//! token. The *receiver* is a pair of bidirectional encoders that scores how
//! strongly a speaker's utterances reveal a persona. Self-play fine-tuning
//! couples the two: the receiver's perception scores shape the reward that a
//! REINFORCE update maximises.
//!
//! Everything runs on a small reverse-mode autodiff substrate in [`neural`],
//! sized for CPU training.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod receiver;
pub mod selfplay;
pub mod text;
pub mod transmitter;

pub use error::{Error, Result};
