//! Reverse-mode differentiation tape with just the primitives a small
//! decoder-only language model and its token-axis filterbanks need.
//!
//! Build a [`Graph`], push leaves and operations, call [`Graph::backward`] on a
//! scalar loss, then read gradients with [`Graph::grad`].
//!
//! ```
//! use splm_autodiff::{Graph, Tensor};
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(&Tensor::from_vec(vec![-1.0, 2.0]).with_grad());
//! let r = g.relu(x);
//! let loss = g.sum(r);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
//! ```

pub mod conv;
mod elementwise;
mod error;
pub mod gradcheck;
mod graph;
mod linalg;
pub mod nn;
mod scalar;
mod shape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{
    grad_check, grad_check_detailed, grad_check_floored, grad_check_many, rel_error, rel_error_floored, CheckOptions, Difference,
    GradCheck,
};
pub use graph::{BackwardReport, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{numel, Tensor};
