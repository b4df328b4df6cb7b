//! Dense tensors with a reverse-mode differentiation tape, the unitary DFT
//! and a finite-difference gradient oracle.

mod conv;
pub mod dft;
mod fd;
mod graph;
mod linalg;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use dft::{dft2, dft2_tensor, idft2};
pub use fd::{finite_difference_grad, max_relative_error, relative_l2_error};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use linalg::singular_values;
pub use params::{ParamContainer, TensorMap};
pub use scalar::{Dual, Scalar};
pub use tensor::Tensor;
