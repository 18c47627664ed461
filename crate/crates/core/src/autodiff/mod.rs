//! Dense tensors with dynamic reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{
    BinaryKind, CustomOp, ElementwiseKind, Gradients, ReduceKind, Tape, UnaryKind, Var,
};
pub use tensor::Tensor;
