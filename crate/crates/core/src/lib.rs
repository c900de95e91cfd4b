//! Variational relational point cloud completion.
//!
//! * [`diff`]: dense arrays with reverse-mode differentiation.
//! * [`geometry`]: neighbourhood search and point-set sampling.
//! * [`metrics`]: Chamfer distance, F-score and Gaussian KL.
//! * [`kernels`]: point self-attention and selective-kernel blocks.
//! * [`networks`]: the probabilistic coarse completion and relational
//!   refinement networks with their joint loss.
//! * [`mvpgen`]: multi-view partial scan dataset generation and storage.
//! * [`train`]: optimizer, schedule, training loop, evaluation and the
//!   gradient-check suite.

pub mod diff;
pub mod geometry;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod mvpgen;
pub mod networks;
pub mod train;

pub use error::{Error, Result};
