//! Toolkit for perspective-aware summarization of community
//! question-answering threads: span identification from ensembled classifier
//! probabilities, span scoring, chain-of-thought prompt programs, summary
//! metrics, instruction optimization and fine-tuning data export.

pub mod config;
pub mod corpus;
pub mod error;
pub mod llmio;
pub mod optimize;
pub mod prf;
pub mod promptkit;
pub mod sftprep;
pub mod spaneval;
pub mod spanid;
pub mod summarize;
pub mod summeval;
pub mod text;

pub use corpus::{Corpus, CqaThread, Perspective, PerspectiveSpan, Split};
pub use prf::Prf;
