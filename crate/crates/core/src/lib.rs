//! Multimodal entity linking: training and evaluation with expert-routed
//! multi-level matching and LLM-assisted mention enhancement.
//!
//! The pipeline: ingest mention/entity files ([`data`]), enhance mention
//! contexts with knowledge-base descriptions ranked by a pluggable LLM
//! backend ([`dme`]), produce coarse+fine features per modality
//! ([`encoders`]), route tokens through sparse expert mixtures ([`smoe`]),
//! score mention-entity pairs intra- and inter-modally ([`matching`]), train
//! with a multi-part contrastive objective ([`training`]) and evaluate
//! ranking quality with MRR and Hits@n ([`eval`]).

pub mod config;
pub mod data;
pub mod dme;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hash;
pub mod matching;
pub mod model;
pub mod seeded;
pub mod smoe;
pub mod synth;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
