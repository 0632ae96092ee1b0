//! Multi-task seq2seq named entity recognition at desk scale.
//!
//! The model points at input tokens to generate entity mentions (flat,
//! nested, and discontinuous), trained jointly with a token-pair relation
//! prediction task. Relation features and lexicon-derived type embeddings
//! can be injected into the attention layers as extra key/value slots.
//!
//! Everything runs on a small f64 tensor library with reverse-mode
//! autodiff (`tensor`, `graph`), so every gradient is checkable against
//! central differences (`gradcheck`).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod lexicon;
pub mod loss;
pub mod model;
pub mod par;
pub mod relation;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
