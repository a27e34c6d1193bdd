//! Matrix arithmetic, a reverse-mode differentiation engine over a fixed op
//! set, and deterministic seeded randomness.

pub mod graph;
pub mod matrix;
pub mod rng;

pub use graph::{check_gradient, Graph, NodeId};
pub use matrix::{col_softmax, log_sum_exp, softmax_vec, Matrix};
pub use rng::{derive_stream, derive_tagged_stream, RngStream};
