//! Deep item response theory for cognitive diagnosis.
//!
//! The crate bundles:
//! - a small reverse-mode autodiff core over dense f64 tensors,
//! - classical IRT / MIRT / DINA baselines fitted by gradient MLE,
//! - the text-aware deep model that diagnoses latent trait,
//!   discrimination, and difficulty from question text and concepts,
//! - a shared Adam training loop,
//! - evaluation metrics and the sparsity / rare-question protocols,
//! - a seeded synthetic corpus generator with ground truth for
//!   parameter-recovery experiments,
//! - a CLI (`dirt`) tying it together with reproducible seeds.

pub mod classical;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod deep;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gen;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
