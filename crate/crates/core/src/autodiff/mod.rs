//! Reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_at, rel_error, GradCheckReport, ROUNDOFF_TOL, STRUCTURAL_ZERO};
pub use tape::{Tape, Var};
