//! Dense tensors, a reverse-mode tape and the gradient-verification tools
//! the training code is checked against.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{finite_difference_gradient, gradcheck, GradcheckOptions, GradcheckReport, WorstCoordinate};
pub use graph::{Adjoint, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// `sg(x)`: forward identity, zero adjoint.
pub fn stop_gradient<S: Scalar>(x: Var<'_, S>) -> Var<'_, S> {
    x.stop_gradient()
}

#[cfg(test)]
mod tests;
