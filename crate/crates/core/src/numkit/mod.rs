//! Dense matrix arithmetic and keyed random streams.

mod matrix;
mod rng;

pub use matrix::{flatten_l2_distance, l2_distance, matmul, Matrix};
pub use rng::{Purpose, RngStream, StreamId};
