//! Chinese spelling check with similarity-graph classifier heads.
//!
//! A confusion set of similar characters defines a pronunciation graph and
//! a shape graph. A stack of linear graph convolutions, merged per
//! character by a temperature-controlled attention over the two graphs and
//! accumulated across layers, turns the extractor's character embeddings
//! into classifier rows for every confusion-set character. The rest of the
//! vocabulary keeps the plain tied-embedding rows.
//!
//! Modules:
//!
//! * [`confusion`]: confusion-set parsing and graph construction
//! * [`extractor`]: toy transformer encoder and embedding table
//! * [`gcn`]: graph convolution, combination, classifier assembly
//! * [`model`]: the end-to-end model and batch gradients
//! * [`trainer`]: AdamW training loop and gradient checking
//! * [`eval`] / [`oracle`]: metrics and their brute-force twin
//! * [`corruption`]: confusion-aware masking and synthetic pairs
//! * [`checkpoint`]: binary model files

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod confusion;
pub mod corruption;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod gcn;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod params;
pub mod real;
pub mod synthetic;
pub mod trainer;

pub use confusion::{build_graphs, normalize_adjacency, vocab_index_map, ConfusionSet, SimilarityGraph};
pub use error::{Error, Result};
pub use eval::{EvalReport, Sample, Triple};
pub use gcn::{CombineMode, GcnConfig};
pub use matrix::{Csr, Matrix};
pub use model::{Model, ModelConfig};
pub use par::Execution;
pub use real::Real;
pub use trainer::{grad_check, train, TrainConfig, TrainReport};
