//! Transfer attacks with public models (TAPM): a desk-scale toolkit.
//!
//! The crate bundles a small reverse-mode autodiff engine, a synthetic
//! dataset and public-model zoo, the transfer-attack suite, the zero-sum
//! game solvers, the PubDef defense trainer, evaluation grids and the
//! perturbation-subspace diagnostics.

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod game;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod pubdef;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, GraphBuilder, NodeId, Op};
pub use tensor::Tensor;
