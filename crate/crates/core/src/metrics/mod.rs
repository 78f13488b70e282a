//! Automatic evaluation and the persona-probe harness.

mod eval;
mod ranking;
mod text;

pub use eval::{
    evaluate_transmitter, probe_receiver, EvalCounts, EvalOptions, EvalReport, EvalRow, PersonaScorer, ProbeReport,
    ProbeRow, RandomScorer,
};
pub use ranking::{hits_at_1, mrr, perplexity, rank_desc};
pub use text::{bleu4, word_f1, BleuParts};
