//! Entropic optimal transport in primal (Sinkhorn), semi-dual (vector
//! potential) and network-parameterized semi-dual form, plus a soft-masked,
//! importance-weighted semi-dual OT training loop for partial domain
//! adaptation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod datagen;
pub mod error;
pub mod exact;
pub mod io;
pub mod measures;
pub mod nnet;
pub mod numerics;
pub mod semidual;
pub mod sinkhorn;
pub mod ssot;

pub use error::{Error, Result};
