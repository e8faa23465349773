//! Gaussian-process regression with HODLR covariance algebra.
//!
//! The Gibbs sampler draws the latent function through fast HODLR solves and
//! a symmetric factorization, so each iteration costs `O(n log^2 n)` rather
//! than `O(n^3)`. Dense reference implementations live in [`oracle`].

pub mod error;
pub mod hodlr;
pub mod kernels;
pub mod lowrank;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod tensorgp;

pub use error::{Error, Result};
