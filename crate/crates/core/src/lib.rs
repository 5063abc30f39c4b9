//! Selective state-space sequence modeling with two modality branches
//! sharing one state-transition matrix, plus the question-generation data
//! pipeline and a desk-scale training/evaluation harness around it.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod qa;
pub mod schedule;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
