//! Topologically constrained attention and flow matching for generating
//! physically feasible action sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: tensors, a reverse-mode tape over a fixed op set, seeded RNG
//! - [`fusion`]: fusion tensors, local rules, couplings, sector projectors and
//!   their consistency residuals
//! - [`topomask`]: the token-type mask built from a fusion system, its
//!   projection after gradient updates, and the lifted norm weight
//! - [`attention`]: masked multi-head attention and the blockwise structural mask
//! - [`flow`]: noising path, regression target, loss terms and integrators
//! - [`blockworld`]: a small manipulation environment with a feasibility oracle
//! - [`policy`]: the vector-field network
//! - [`trainer`]: training loop, optimizer, evaluation
//! - [`checkpoint`]: the binary model container

pub mod attention;
pub mod blockworld;
pub mod checkpoint;
mod error;
pub mod flow;
pub mod fusion;
pub mod numcore;
pub mod policy;
pub mod topomask;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Rng, Tape, Tensor, Var};
