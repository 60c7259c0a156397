//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications in evaluation order; a single
//! reverse sweep in [`Tape::backward`] produces gradients for every
//! differentiable leaf and every bound [`ParamRegistry`] entry. The primitive
//! set is deliberately small: per-row affine maps, elementwise arithmetic,
//! axis reductions, row gathers, concatenation and softmax.
//!
//! ```
//! use vrckit_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.input(Tensor::scalar(3.0));
//! let sq = tape.square(w).unwrap();
//! let loss = tape.sum(sq, 0).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).unwrap().data(), &[6.0]);
//! ```

mod error;
mod gradcheck;
mod registry;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    grad_check, grad_check_registry, relative_error, GradCheckOptions, GradCheckReport,
};
pub use registry::{checkpoint_paths, lr_schedule, AdamConfig, ParamRegistry};
pub use tape::{forward_primitive, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
