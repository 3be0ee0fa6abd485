//! Dense tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod dense;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{gradient_check, random_gradient_check};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{NodeGrads, OpKind, Precision, Tape, Var, LAYER_NORM_EPS, PROB_FLOOR};

pub(crate) use tape::focal_term;
