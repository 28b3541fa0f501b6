//! Minimal dense-array math with reverse-mode differentiation and a
//! finite-difference gradient checker.

pub mod array;
pub mod check;
pub mod ctx;
pub mod tape;

pub use array::{
    dot, gelu, layer_norm_rows, log_softmax_rows, matmul, matmul_nt, matmul_tn, sigmoid,
    softmax, softmax_rows, stack_rows, transpose, Array,
};
pub use check::{grad_check, DEFAULT_STEP};
pub use ctx::{Ctx, EvalCtx};
pub use tape::{Role, Tape, Var};
