//! Context-aware contrastive pretraining at desk scale.
//!
//! A small reverse-mode autodiff engine carries two toy encoders, the CLIP and
//! SigLIP objectives, and the context-aware variant in which each image
//! embedding is re-expressed by masked cross-attention over the rest of its
//! batch before being scored against its caption. On the evaluation side it
//! offers training-free few-shot classifiers (prototypes, Tip-Adapter,
//! nearest-neighbour voting), seeded episodic evaluation and gain analysis.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod autodiff;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod seed;
pub mod trainer;

pub use autodiff::{Array2, Graph, NodeId};
pub use config::Experiment;
pub use context::{ContextBuffer, LixpConfig, TwoStageConfig};
pub use data::{Embedded, EmbeddingBatch, SyntheticTaskSpec};
pub use error::{Error, Result};
pub use losses::TemperatureSet;
pub use model::Model;
pub use trainer::{train, TrainConfig, TrainLog};
