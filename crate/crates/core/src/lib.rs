//! Dynamic graph convolutional recurrent network (DGCRN) for multivariate
//! traffic-speed forecasting.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: dense tensors with tape-based reverse-mode gradients and a
//!   central finite-difference oracle.
//! - [`graph`]: the distance-based static adjacency and its normalizations.
//! - [`generator`]: hyper-networks producing per-step dynamic adjacency.
//! - [`conv`]: K-hop convolution mixing input, dynamic and static graphs.
//! - [`model`]: the graph-convolutional GRU cell and the encoder/decoder.
//! - [`training`]: curriculum horizon, scheduled sampling, Adam, early stopping.
//! - [`data`], [`eval`]: ingestion, windowing, metrics and baselines.

pub mod config;
pub mod container;
pub mod data;
pub mod diagnostics;
pub mod conv;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod training;

pub use config::{Ablation, Config};
pub use error::{Error, Result};
pub use numerics::{ParamId, ParamSet, Tape, Tensor, Var};
