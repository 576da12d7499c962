//! Two-branch metric-learning trainer: a small residual CNN backbone feeding
//! an angular-margin classification head (branch 1, the evaluation embedding)
//! and a transformer-encoder loss head (branch 2), combined through a weighted
//! cross-entropy loss. Everything runs on a from-scratch tape-based autodiff
//! core with a finite-difference oracle.

pub mod error;
pub mod tensor;
pub mod kernels;
pub mod graph;
pub mod gradcheck;
pub mod checks;
pub mod params;
pub mod backbone;
pub mod metric;
pub mod transformer;
pub mod model;
pub mod data;
pub mod trainer;
pub mod eval;
pub mod checkpoint;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use graph::{Graph, MarginKind, Var};
pub use tensor::{Scalar, Tensor};
