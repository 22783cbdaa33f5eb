//! Retrieval-augmented guard classification with adversarial context
//! training, scheduled teacher/student distillation and an evolving,
//! confidence-gated knowledge base.

pub mod ekb;
pub mod encoder;
pub mod error;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod guard;
pub mod kb;
pub mod par;
pub mod perturbation;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{Label, Source};
