//! Reverse-mode differentiation: the tape, fused attention kernels and
//! finite-difference gradient checking.

mod attention;
mod gradcheck;
pub mod nn;
mod tape;

pub use attention::{AttnShape, Rope};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{silu, Gradients, Tape, Var};
