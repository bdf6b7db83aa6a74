//! Influence-function calculus for moment-condition models on finite laws.
//!
//! The crate computes joint and sequential influence functions in closed
//! form, constructs locally robust and efficient moment corrections, checks
//! the equivalence and adaptivity conditions linking the two, and verifies
//! every analytic result against an independent finite-difference
//! functional-derivative oracle plus a Monte Carlo harness.

pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod estimands;
pub mod ident;
pub mod influence;
pub mod matrix;
pub mod moments;
pub mod oracle;

pub use error::{Error, Result};
