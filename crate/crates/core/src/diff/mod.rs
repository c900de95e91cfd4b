//! Dense `f64` arrays, a define-by-run tape, parameter storage, checkpoints
//! and a finite-difference oracle.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_params, grad_check_sampled, GradReport};
pub use params::ParamStore;
pub use tape::{Activation, Gradients, Reduction, Tape, Var, IDW_EPS};
pub use tensor::Tensor;
