//! Reverse-mode differentiation and a finite-difference verifier.

mod check;
pub mod suite;
mod tape;

pub use check::{fd_check, fd_check_mixed, FdConfig, GradReport, GradRow, Objective};
pub use tape::{Grads, Tape, Var};
