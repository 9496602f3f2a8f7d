//! Reverse-mode differentiation over a small closed set of primitives, plus
//! central-difference oracles for checking it.
//!
//! The primitives are `matmul`, `add`, `mul`, elementwise [`Unary`] maps,
//! `softmax_rows`, `sum`, `gather` (index maps: slicing, reshapes,
//! transposes, broadcasts, Toeplitz layouts), `concat`, `depthwise_conv`
//! and `selective_scan`. Everything else in the crate is composed from them.

mod check;
mod param;
mod tape;

pub use check::{finite_diff_grad, grad_check, GradCheck};
pub use param::{ParamRole, ParamStore, Parameter};
pub use tape::{phi1, Axis, Bindings, Gradients, Tape, Unary, Var, ZERO};
