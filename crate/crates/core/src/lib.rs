//! Retrieval-augmented sequence labeling.
//!
//! A sentence is tagged by a linear-chain CRF over token representations of
//! one of two input views: the bare sentence, or the sentence followed by
//! related texts retrieved from a search service and re-ranked by greedy
//! token-matching similarity. One model is trained on both views, with a
//! consistency term that pulls the bare view toward the context-informed one
//! (either on token representations or on CRF marginal label distributions).
//!
//! Modules follow the pipeline: [`corpus`] (data and scoring), [`retrieval`],
//! [`reranker`], [`encoder`], [`crf`] and [`trainer`]. [`synth`] generates a
//! small ambiguity task with search fixtures for experiments.

pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod reranker;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
