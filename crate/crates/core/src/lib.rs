//! Conversation DAGs and the DAG-ERC emotion classifier.
//!
//! The crate is split along the lines of the method:
//!
//! - [`corpus`]: the conversation data model, the line-delimited loader and a
//!   hashing featurizer for corpora without precomputed features.
//! - [`daggraph`]: speaker-aware DAG construction over utterances, the
//!   baseline DAG variants, an independent constraint checker, and DOT export.
//! - [`numerics`]: a small f64 tape with exact reverse-mode gradients, the GRU
//!   cell, and a finite-difference gradient checker.
//! - [`model`]: the stacked DAG layers, prediction head, loss and ablations.
//! - [`metrics`]: weighted F1, micro F1 excluding a class, confusion matrix and
//!   the emotional-shift accuracy split.
//! - [`pipeline`]: Adam, the training loop, evaluation and the experiment sweeps.
//!
//! Node indices are 0-based everywhere in the API.

pub mod corpus;
pub mod daggraph;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;

pub use corpus::{Conversation, Corpus, Utterance};
pub use daggraph::{ConvDag, DagVariant, Relation};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{Ablation, Model, ModelConfig};
pub use numerics::{Gradients, ParamSet, Tape};
pub use pipeline::{RunLog, TrainConfig};
