//! Graph-guided multi-round retrieval for conversational open-domain
//! question answering.
//!
//! The crate is organised along the answer pipeline:
//!
//! | module | stage |
//! |---|---|
//! | [`corpus`] | passage collection, hyperlink graph, conversations, fixtures |
//! | [`lexical`] | TF-IDF retriever seeding the explorer |
//! | [`dense`] | featurizer, projections, offline embedding store, exact MIPS |
//! | [`dhm`] | history triplets, attention, multi-round retrieval |
//! | [`explorer`] | seed set, hop expansion, GAT rescoring |
//! | [`rank_read`] | listwise ranker, span reader, answer extraction |
//! | [`training`] | losses, analytic gradients, phase schedule, checkpoints |
//! | [`eval`] | F1, HEQ, MRR, Recall, hop coverage |
//!
//! [`pipeline`] wires the stages together for a single conversation turn.

pub mod config;
pub mod corpus;
pub mod dense;
pub mod dhm;
pub mod error;
pub mod eval;
pub mod explorer;
pub mod lexical;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod rank_read;
pub mod training;

pub use error::{Error, Result};
