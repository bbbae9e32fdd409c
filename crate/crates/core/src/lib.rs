//! Sparse-input convolutional multiple instance learning.
//!
//! Bags of located patches are embedded by a shared patch embedder, the
//! embeddings are scattered onto a coordinate-sparse grid, and a small sparse
//! CNN pools that grid into a bag embedding that a linear classifier maps to
//! class probabilities. The crate also carries the permutation-invariant
//! pooling baselines, a training and evaluation harness, and a synthetic
//! benchmark whose labels depend only on spatial arrangement.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mil_pooling;
pub mod model;
pub mod par;
pub mod rng;
pub mod sparse_cnn;
pub mod sparse_map;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
